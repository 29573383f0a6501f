//! Tape-based reverse-mode differentiation over dense arrays.
//!
//! A [`Graph`] records every operation as a node holding its forward value.
//! [`Graph::backward`] walks the tape in reverse and returns [`Gradients`]
//! for every node that depends on a differentiable leaf. Shape errors in op
//! construction are programming errors and panic; runtime conditions
//! (non-scalar output, stale variables, non-finite values) are reported
//! through [`NumError`].

use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use crate::scalar::{gemm, MatView, Scalar};

use super::optim::ParamId;
use super::{Array, NumError};

static NEXT_GRAPH_ID: AtomicU64 = AtomicU64::new(1);

/// Handle to a node of a specific graph.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var {
    idx: usize,
    graph: u64,
}

enum Op<T> {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Div(usize, usize),
    Neg(usize),
    Scale(usize, T),
    AddConst(usize),
    MatMul { a: usize, b: usize, trans_b: bool },
    AddRow(usize, usize),
    Relu(usize),
    Sigmoid(usize),
    Exp(usize),
    Log(usize),
    Sqrt(usize),
    Sin(usize),
    Cos(usize),
    Abs(usize),
    Square(usize),
    Atan2(usize, usize),
    Softmax(usize),
    LayerNorm { x: usize, gain: usize, bias: usize, xhat: Vec<T>, rstd: Vec<T> },
    SliceCols { x: usize, start: usize },
    ConcatCols(Vec<usize>),
    SliceRows { x: usize, start: usize },
    ConcatRows(Vec<usize>),
    Reshape(usize),
    GatherRows { x: usize, rows: Vec<usize> },
    Index { x: usize, at: usize },
    Stack(Vec<usize>),
    Sum(usize),
    Focal { logits: usize, targets: Vec<T>, alpha: T, gamma: T },
    Chamfer { a: usize, b: usize, nn_ab: Vec<usize>, nn_ba: Vec<usize> },
}

impl<T> Op<T> {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Div(..) => "div",
            Op::Neg(_) => "neg",
            Op::Scale(..) => "scale",
            Op::AddConst(_) => "add_const",
            Op::MatMul { .. } => "matmul",
            Op::AddRow(..) => "add_row",
            Op::Relu(_) => "relu",
            Op::Sigmoid(_) => "sigmoid",
            Op::Exp(_) => "exp",
            Op::Log(_) => "log",
            Op::Sqrt(_) => "sqrt",
            Op::Sin(_) => "sin",
            Op::Cos(_) => "cos",
            Op::Abs(_) => "abs",
            Op::Square(_) => "square",
            Op::Atan2(..) => "atan2",
            Op::Softmax(_) => "softmax_rows",
            Op::LayerNorm { .. } => "layer_norm",
            Op::SliceCols { .. } => "slice_cols",
            Op::ConcatCols(_) => "concat_cols",
            Op::SliceRows { .. } => "slice_rows",
            Op::ConcatRows(_) => "concat_rows",
            Op::Reshape(_) => "reshape",
            Op::GatherRows { .. } => "gather_rows",
            Op::Index { .. } => "index",
            Op::Stack(_) => "stack",
            Op::Sum(_) => "sum",
            Op::Focal { .. } => "sigmoid_focal",
            Op::Chamfer { .. } => "chamfer",
        }
    }
}

struct Node<T> {
    value: Array<T>,
    op: Op<T>,
    needs_grad: bool,
    param: Option<ParamId>,
}

/// Recording graph. One graph belongs to one logical thread at a time.
pub struct Graph<T: Scalar> {
    id: u64,
    nodes: Vec<Node<T>>,
    non_finite: Option<&'static str>,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients produced by one backward pass.
pub struct Gradients<T> {
    graph: u64,
    grads: Vec<Option<Vec<T>>>,
    shapes: Vec<Vec<usize>>,
    params: Vec<(ParamId, usize)>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient with respect to `v`, or `None` if `v` does not influence the output.
    pub fn wrt(&self, v: Var) -> Option<Array<T>> {
        if v.graph != self.graph {
            return None;
        }
        self.grads
            .get(v.idx)?
            .as_ref()
            .map(|g| Array::new(&self.shapes[v.idx], g.clone()).expect("gradient shape"))
    }

    /// Gradients of every registered parameter that was reached.
    pub fn params(&self) -> impl Iterator<Item = (ParamId, &[T])> + '_ {
        self.params
            .iter()
            .filter_map(move |&(pid, idx)| self.grads[idx].as_deref().map(|g| (pid, g)))
    }
}

fn bcast_len(a: usize, b: usize) -> usize {
    if a == b || b == 1 {
        a
    } else if a == 1 {
        b
    } else {
        panic!("incompatible elementwise lengths {a} and {b}")
    }
}

#[inline]
fn at<T: Copy>(v: &[T], i: usize) -> T {
    if v.len() == 1 {
        v[0]
    } else {
        v[i]
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self { id: NEXT_GRAPH_ID.fetch_add(1, Ordering::Relaxed), nodes: Vec::new(), non_finite: None }
    }

    /// Drop every node; variables from before the call become stale.
    pub fn clear(&mut self) {
        self.nodes.clear();
        self.non_finite = None;
        self.id = NEXT_GRAPH_ID.fetch_add(1, Ordering::Relaxed);
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn check(&self, v: Var) -> usize {
        assert_eq!(v.graph, self.id, "variable from a different or cleared graph");
        v.idx
    }

    fn push(&mut self, value: Array<T>, op: Op<T>, needs_grad: bool, param: Option<ParamId>) -> Var {
        if cfg!(debug_assertions) && self.non_finite.is_none() && !value.all_finite() {
            self.non_finite = Some(op.name());
        }
        self.nodes.push(Node { value, op, needs_grad, param });
        Var { idx: self.nodes.len() - 1, graph: self.id }
    }

    fn ng(&self, i: usize) -> bool {
        self.nodes[i].needs_grad
    }

    pub fn value(&self, v: Var) -> &Array<T> {
        &self.nodes[self.check(v)].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.value(v).shape()
    }

    /// First element of `v`'s value.
    pub fn scalar(&self, v: Var) -> T {
        self.value(v).data()[0]
    }

    /// Non-differentiable input.
    pub fn constant(&mut self, value: Array<T>) -> Var {
        self.push(value, Op::Leaf, false, None)
    }

    pub fn constant_scalar(&mut self, x: T) -> Var {
        self.constant(Array::scalar(x))
    }

    /// Differentiable leaf.
    pub fn input(&mut self, value: Array<T>) -> Var {
        self.push(value, Op::Leaf, true, None)
    }

    /// Differentiable leaf tied to a stored parameter; its gradient is reported by [`Gradients::params`].
    pub fn param(&mut self, id: ParamId, value: Array<T>) -> Var {
        self.push(value, Op::Leaf, true, Some(id))
    }

    fn binary(&mut self, a: Var, b: Var, f: impl Fn(T, T) -> T, op: fn(usize, usize) -> Op<T>) -> Var {
        let (ia, ib) = (self.check(a), self.check(b));
        let (va, vb) = (&self.nodes[ia].value, &self.nodes[ib].value);
        let n = bcast_len(va.numel(), vb.numel());
        let shape = if va.numel() == n { va.shape().to_vec() } else { vb.shape().to_vec() };
        let (da, db) = (va.data(), vb.data());
        let data = (0..n).map(|i| f(at(da, i), at(db, i))).collect();
        let ng = self.ng(ia) || self.ng(ib);
        self.push(Array::new(&shape, data).expect("binary shape"), op(ia, ib), ng, None)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, |x, y| x + y, Op::Add)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, |x, y| x - y, Op::Sub)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, |x, y| x * y, Op::Mul)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, |x, y| x / y, Op::Div)
    }

    fn unary(&mut self, x: Var, f: impl Fn(T) -> T, op: Op<T>) -> Var {
        let ix = self.check(x);
        let v = &self.nodes[ix].value;
        let data = v.data().iter().map(|&e| f(e)).collect();
        let out = Array::new(v.shape(), data).expect("unary shape");
        let ng = self.ng(ix);
        self.push(out, op, ng, None)
    }

    pub fn neg(&mut self, x: Var) -> Var {
        let i = self.check(x);
        self.unary(x, |e| -e, Op::Neg(i))
    }

    pub fn scale(&mut self, x: Var, c: T) -> Var {
        let i = self.check(x);
        self.unary(x, |e| e * c, Op::Scale(i, c))
    }

    pub fn add_const(&mut self, x: Var, c: T) -> Var {
        let i = self.check(x);
        self.unary(x, |e| e + c, Op::AddConst(i))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let i = self.check(x);
        self.unary(x, |e| if e > T::zero() { e } else { T::zero() }, Op::Relu(i))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let i = self.check(x);
        self.unary(x, sigmoid, Op::Sigmoid(i))
    }

    pub fn exp(&mut self, x: Var) -> Var {
        let i = self.check(x);
        self.unary(x, T::exp, Op::Exp(i))
    }

    pub fn log(&mut self, x: Var) -> Var {
        let i = self.check(x);
        self.unary(x, T::ln, Op::Log(i))
    }

    pub fn sqrt(&mut self, x: Var) -> Var {
        let i = self.check(x);
        self.unary(x, T::sqrt, Op::Sqrt(i))
    }

    pub fn sin(&mut self, x: Var) -> Var {
        let i = self.check(x);
        self.unary(x, T::sin, Op::Sin(i))
    }

    pub fn cos(&mut self, x: Var) -> Var {
        let i = self.check(x);
        self.unary(x, T::cos, Op::Cos(i))
    }

    pub fn abs(&mut self, x: Var) -> Var {
        let i = self.check(x);
        self.unary(x, T::abs, Op::Abs(i))
    }

    pub fn square(&mut self, x: Var) -> Var {
        let i = self.check(x);
        self.unary(x, |e| e * e, Op::Square(i))
    }

    /// Elementwise `atan2(y, x)`; both operands must have the same length.
    pub fn atan2(&mut self, y: Var, x: Var) -> Var {
        let (iy, ix) = (self.check(y), self.check(x));
        assert_eq!(self.nodes[iy].value.numel(), self.nodes[ix].value.numel(), "atan2 length mismatch");
        self.binary(y, x, T::atan2, Op::Atan2)
    }

    /// `a @ b` (or `a @ b^T` when `trans_b`), both rank 2.
    fn matmul_impl(&mut self, a: Var, b: Var, trans_b: bool) -> Var {
        let (ia, ib) = (self.check(a), self.check(b));
        let (va, vb) = (&self.nodes[ia].value, &self.nodes[ib].value);
        assert!(va.rank() == 2 && vb.rank() == 2, "matmul expects rank-2 operands");
        let (m, k) = va.dims2();
        let (br, bc) = vb.dims2();
        let n = if trans_b { br } else { bc };
        let mut out = vec![T::zero(); m * n];
        gemm(va.data(), MatView::new(m, k, false), vb.data(), MatView::new(br, bc, trans_b), &mut out, false);
        let ng = self.ng(ia) || self.ng(ib);
        self.push(Array::new(&[m, n], out).expect("matmul"), Op::MatMul { a: ia, b: ib, trans_b }, ng, None)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        self.matmul_impl(a, b, false)
    }

    /// `a @ b^T`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Var {
        self.matmul_impl(a, b, true)
    }

    /// Adds a length-`c` row vector to every row of an `r x c` matrix.
    pub fn add_row(&mut self, x: Var, row: Var) -> Var {
        let (ix, ir) = (self.check(x), self.check(row));
        let (vx, vr) = (&self.nodes[ix].value, &self.nodes[ir].value);
        let (r, c) = vx.dims2();
        assert_eq!(vr.numel(), c, "add_row width mismatch");
        let mut data = vx.data().to_vec();
        for rr in 0..r {
            for (d, &b) in data[rr * c..(rr + 1) * c].iter_mut().zip(vr.data()) {
                *d += b;
            }
        }
        let shape = vx.shape().to_vec();
        let ng = self.ng(ix) || self.ng(ir);
        self.push(Array::new(&shape, data).expect("add_row"), Op::AddRow(ix, ir), ng, None)
    }

    /// Row-wise softmax. `mask[i*cols+j] == true` removes entry `j` from row `i`;
    /// blocked entries get weight exactly zero and a fully blocked row is all zeros.
    pub fn softmax_rows(&mut self, x: Var, mask: Option<Arc<[bool]>>) -> Var {
        let ix = self.check(x);
        let vx = &self.nodes[ix].value;
        let (r, c) = vx.dims2();
        if let Some(m) = &mask {
            assert_eq!(m.len(), r * c, "softmax mask shape");
        }
        let mut out = vec![T::zero(); r * c];
        for i in 0..r {
            let row = &vx.data()[i * c..(i + 1) * c];
            let open = |j: usize| mask.as_ref().is_none_or(|m| !m[i * c + j]);
            let mut mx = T::neg_infinity();
            for (j, &e) in row.iter().enumerate() {
                if open(j) && e > mx {
                    mx = e;
                }
            }
            if mx == T::neg_infinity() {
                continue;
            }
            let mut sum = T::zero();
            let orow = &mut out[i * c..(i + 1) * c];
            for j in 0..c {
                if open(j) {
                    let e = (row[j] - mx).exp();
                    orow[j] = e;
                    sum += e;
                }
            }
            for o in orow.iter_mut() {
                *o /= sum;
            }
        }
        let shape = vx.shape().to_vec();
        let ng = self.ng(ix);
        self.push(Array::new(&shape, out).expect("softmax"), Op::Softmax(ix), ng, None)
    }

    /// Row-wise layer normalization with learned gain and bias (eps = 1e-5).
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Var {
        let (ix, ig, ib) = (self.check(x), self.check(gain), self.check(bias));
        let vx = &self.nodes[ix].value;
        let (r, c) = vx.dims2();
        let (vg, vb) = (self.nodes[ig].value.data(), self.nodes[ib].value.data());
        assert!(vg.len() == c && vb.len() == c, "layer_norm parameter width");
        let eps = T::lit(1e-5);
        let cn = T::from_usize(c).expect("usize");
        let mut xhat = vec![T::zero(); r * c];
        let mut rstd = vec![T::zero(); r];
        let mut out = vec![T::zero(); r * c];
        for i in 0..r {
            let row = &vx.data()[i * c..(i + 1) * c];
            let mean = row.iter().copied().sum::<T>() / cn;
            let var = row.iter().map(|&e| (e - mean) * (e - mean)).sum::<T>() / cn;
            let rs = T::one() / (var + eps).sqrt();
            rstd[i] = rs;
            for j in 0..c {
                let h = (row[j] - mean) * rs;
                xhat[i * c + j] = h;
                out[i * c + j] = h * vg[j] + vb[j];
            }
        }
        let shape = vx.shape().to_vec();
        let ng = self.ng(ix) || self.ng(ig) || self.ng(ib);
        let op = Op::LayerNorm { x: ix, gain: ig, bias: ib, xhat, rstd };
        self.push(Array::new(&shape, out).expect("layer_norm"), op, ng, None)
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Var {
        let ix = self.check(x);
        let vx = &self.nodes[ix].value;
        let (r, c) = vx.dims2();
        assert!(start + len <= c, "slice_cols out of range");
        let mut data = Vec::with_capacity(r * len);
        for i in 0..r {
            data.extend_from_slice(&vx.data()[i * c + start..i * c + start + len]);
        }
        let ng = self.ng(ix);
        self.push(Array::new(&[r, len], data).expect("slice_cols"), Op::SliceCols { x: ix, start }, ng, None)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let idx: Vec<usize> = parts.iter().map(|&p| self.check(p)).collect();
        let r = self.nodes[idx[0]].value.dims2().0;
        let widths: Vec<usize> = idx
            .iter()
            .map(|&i| {
                let (rr, cc) = self.nodes[i].value.dims2();
                assert_eq!(rr, r, "concat_cols row mismatch");
                cc
            })
            .collect();
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(r * total);
        for row in 0..r {
            for (&i, &w) in idx.iter().zip(&widths) {
                data.extend_from_slice(&self.nodes[i].value.data()[row * w..(row + 1) * w]);
            }
        }
        let ng = idx.iter().any(|&i| self.ng(i));
        self.push(Array::new(&[r, total], data).expect("concat_cols"), Op::ConcatCols(idx), ng, None)
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Var {
        let ix = self.check(x);
        let vx = &self.nodes[ix].value;
        let (r, c) = vx.dims2();
        assert!(start + len <= r, "slice_rows out of range");
        let data = vx.data()[start * c..(start + len) * c].to_vec();
        let ng = self.ng(ix);
        self.push(Array::new(&[len, c], data).expect("slice_rows"), Op::SliceRows { x: ix, start }, ng, None)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let idx: Vec<usize> = parts.iter().map(|&p| self.check(p)).collect();
        let c = self.nodes[idx[0]].value.dims2().1;
        let mut data = Vec::new();
        let mut rows = 0;
        for &i in &idx {
            let (rr, cc) = self.nodes[i].value.dims2();
            assert_eq!(cc, c, "concat_rows column mismatch");
            rows += rr;
            data.extend_from_slice(self.nodes[i].value.data());
        }
        let ng = idx.iter().any(|&i| self.ng(i));
        self.push(Array::new(&[rows, c], data).expect("concat_rows"), Op::ConcatRows(idx), ng, None)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Var {
        let ix = self.check(x);
        let out = self.nodes[ix].value.clone().reshaped(shape).expect("reshape element count");
        let ng = self.ng(ix);
        self.push(out, Op::Reshape(ix), ng, None)
    }

    pub fn gather_rows(&mut self, x: Var, rows: &[usize]) -> Var {
        let ix = self.check(x);
        let vx = &self.nodes[ix].value;
        let (r, c) = vx.dims2();
        let mut data = Vec::with_capacity(rows.len() * c);
        for &row in rows {
            assert!(row < r, "gather_rows index {row} out of range {r}");
            data.extend_from_slice(&vx.data()[row * c..(row + 1) * c]);
        }
        let ng = self.ng(ix);
        let op = Op::GatherRows { x: ix, rows: rows.to_vec() };
        self.push(Array::new(&[rows.len(), c], data).expect("gather_rows"), op, ng, None)
    }

    /// Element at flat position `at`, as a length-1 array.
    pub fn index(&mut self, x: Var, at: usize) -> Var {
        let ix = self.check(x);
        let v = self.nodes[ix].value.data()[at];
        let ng = self.ng(ix);
        self.push(Array::scalar(v), Op::Index { x: ix, at }, ng, None)
    }

    /// Stacks length-1 arrays into a vector.
    pub fn stack(&mut self, parts: &[Var]) -> Var {
        let idx: Vec<usize> = parts.iter().map(|&p| self.check(p)).collect();
        let data: Vec<T> = idx
            .iter()
            .map(|&i| {
                let v = &self.nodes[i].value;
                assert_eq!(v.numel(), 1, "stack expects scalars");
                v.data()[0]
            })
            .collect();
        let ng = idx.iter().any(|&i| self.ng(i));
        self.push(Array::from_vec(data), Op::Stack(idx), ng, None)
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let ix = self.check(x);
        let s = self.nodes[ix].value.data().iter().copied().sum();
        let ng = self.ng(ix);
        self.push(Array::scalar(s), Op::Sum(ix), ng, None)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.value(x).numel();
        let s = self.sum(x);
        self.scale(s, T::one() / T::from_usize(n).expect("usize"))
    }

    /// Sum over all elements of the binary sigmoid focal loss.
    ///
    /// `targets` must hold 0/1 values with the logits' shape. Uses log-sigmoid
    /// forms so saturated logits stay finite.
    pub fn sigmoid_focal(&mut self, logits: Var, targets: &[T], alpha: T, gamma: T) -> Var {
        let il = self.check(logits);
        let vl = self.nodes[il].value.data();
        assert_eq!(vl.len(), targets.len(), "focal target shape");
        let total = vl
            .iter()
            .zip(targets)
            .map(|(&x, &t)| focal_term(x, t, alpha, gamma).0)
            .sum();
        let ng = self.ng(il);
        let op = Op::Focal { logits: il, targets: targets.to_vec(), alpha, gamma };
        self.push(Array::scalar(total), op, ng, None)
    }

    /// Symmetric mean nearest-neighbour Euclidean distance between two `n x 2` point sets.
    ///
    /// The gradient of a zero distance is taken as zero.
    pub fn chamfer(&mut self, a: Var, b: Var) -> Var {
        let (ia, ib) = (self.check(a), self.check(b));
        let (pa, pb) = (self.nodes[ia].value.data(), self.nodes[ib].value.data());
        assert!(
            pa.len() % 2 == 0 && pb.len() % 2 == 0 && !pa.is_empty() && !pb.is_empty(),
            "chamfer expects nonempty n x 2 point sets"
        );
        let (nn_ab, sum_ab) = nearest(pa, pb);
        let (nn_ba, sum_ba) = nearest(pb, pa);
        let na = T::from_usize(pa.len() / 2).expect("usize");
        let nb = T::from_usize(pb.len() / 2).expect("usize");
        let half = T::lit(0.5);
        let val = half * (sum_ab / na + sum_ba / nb);
        let ng = self.ng(ia) || self.ng(ib);
        self.push(Array::scalar(val), Op::Chamfer { a: ia, b: ib, nn_ab, nn_ba }, ng, None)
    }

    /// Reverse sweep from a scalar output.
    pub fn backward(&self, out: Var) -> Result<Gradients<T>, NumError> {
        if out.graph != self.id || out.idx >= self.nodes.len() {
            return Err(NumError::GraphFreed);
        }
        let root = &self.nodes[out.idx].value;
        if root.numel() != 1 {
            return Err(NumError::NotScalar(root.shape().to_vec()));
        }
        if let Some(op) = self.non_finite {
            return Err(NumError::NonFinite(op));
        }
        let mut grads: Vec<Option<Vec<T>>> = vec![None; out.idx + 1];
        grads[out.idx] = Some(vec![T::one()]);
        for idx in (0..=out.idx).rev() {
            if !self.nodes[idx].needs_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.backprop(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }
        let params = self
            .nodes
            .iter()
            .enumerate()
            .take(out.idx + 1)
            .filter_map(|(i, n)| n.param.map(|p| (p, i)))
            .collect();
        let shapes = self.nodes.iter().take(out.idx + 1).map(|n| n.value.shape().to_vec()).collect();
        Ok(Gradients { graph: self.id, grads, shapes, params })
    }

    fn acc<'g>(&self, grads: &'g mut [Option<Vec<T>>], i: usize) -> Option<&'g mut Vec<T>> {
        if !self.nodes[i].needs_grad {
            return None;
        }
        let n = self.nodes[i].value.numel();
        Some(grads[i].get_or_insert_with(|| vec![T::zero(); n]))
    }

    fn acc_bcast(&self, grads: &mut [Option<Vec<T>>], i: usize, g: &[T], f: impl Fn(usize, T) -> T) {
        // First same-shape contribution: build the buffer instead of zeroing then adding.
        if grads[i].is_none() && self.nodes[i].needs_grad && self.nodes[i].value.numel() == g.len() {
            grads[i] = Some(g.iter().enumerate().map(|(k, &gk)| f(k, gk)).collect());
            return;
        }
        if let Some(gi) = self.acc(grads, i) {
            if gi.len() == 1 && g.len() > 1 {
                let s: T = g.iter().enumerate().map(|(k, &gk)| f(k, gk)).sum();
                gi[0] += s;
            } else {
                for (k, (d, &gk)) in gi.iter_mut().zip(g).enumerate() {
                    *d += f(k, gk);
                }
            }
        }
    }

    fn val(&self, i: usize) -> &[T] {
        self.nodes[i].value.data()
    }

    fn backprop(&self, idx: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let y = self.val(idx);
        match &self.nodes[idx].op {
            Op::Leaf => {}
            &Op::Add(a, b) => {
                self.acc_bcast(grads, a, g, |_, gk| gk);
                self.acc_bcast(grads, b, g, |_, gk| gk);
            }
            &Op::Sub(a, b) => {
                self.acc_bcast(grads, a, g, |_, gk| gk);
                self.acc_bcast(grads, b, g, |_, gk| -gk);
            }
            &Op::Mul(a, b) => {
                let (va, vb) = (self.val(a), self.val(b));
                self.acc_bcast(grads, a, g, |k, gk| gk * at(vb, k));
                self.acc_bcast(grads, b, g, |k, gk| gk * at(va, k));
            }
            &Op::Div(a, b) => {
                let (va, vb) = (self.val(a), self.val(b));
                self.acc_bcast(grads, a, g, |k, gk| gk / at(vb, k));
                self.acc_bcast(grads, b, g, |k, gk| {
                    let d = at(vb, k);
                    -gk * at(va, k) / (d * d)
                });
            }
            &Op::Neg(x) => self.acc_bcast(grads, x, g, |_, gk| -gk),
            &Op::Scale(x, c) => self.acc_bcast(grads, x, g, |_, gk| gk * c),
            &Op::AddConst(x) => self.acc_bcast(grads, x, g, |_, gk| gk),
            &Op::MatMul { a, b, trans_b } => {
                let (va, vb) = (&self.nodes[a].value, &self.nodes[b].value);
                let (m, k) = va.dims2();
                let (br, bc) = vb.dims2();
                let n = if trans_b { br } else { bc };
                let gv = MatView::new(m, n, false);
                if let Some(ga) = self.acc(grads, a) {
                    // dA = dC @ op(B)^T
                    gemm(g, gv, vb.data(), MatView::new(br, bc, !trans_b), ga, true);
                }
                if let Some(gb) = self.acc(grads, b) {
                    if trans_b {
                        // B is n x k: dB = dC^T @ A
                        gemm(g, MatView::new(m, n, true), va.data(), MatView::new(m, k, false), gb, true);
                    } else {
                        // B is k x n: dB = A^T @ dC
                        gemm(va.data(), MatView::new(m, k, true), g, gv, gb, true);
                    }
                }
            }
            &Op::AddRow(x, row) => {
                self.acc_bcast(grads, x, g, |_, gk| gk);
                let c = self.nodes[row].value.numel();
                if let Some(gr) = self.acc(grads, row) {
                    for (k, &gk) in g.iter().enumerate() {
                        gr[k % c] += gk;
                    }
                }
            }
            &Op::Relu(x) => {
                let vx = self.val(x);
                self.acc_bcast(grads, x, g, |k, gk| if vx[k] > T::zero() { gk } else { T::zero() });
            }
            &Op::Sigmoid(x) => self.acc_bcast(grads, x, g, |k, gk| gk * y[k] * (T::one() - y[k])),
            &Op::Exp(x) => self.acc_bcast(grads, x, g, |k, gk| gk * y[k]),
            &Op::Log(x) => {
                let vx = self.val(x);
                self.acc_bcast(grads, x, g, |k, gk| gk / vx[k]);
            }
            &Op::Sqrt(x) => self.acc_bcast(grads, x, g, |k, gk| {
                if y[k] > T::zero() {
                    gk * T::lit(0.5) / y[k]
                } else {
                    T::zero()
                }
            }),
            &Op::Sin(x) => {
                let vx = self.val(x);
                self.acc_bcast(grads, x, g, |k, gk| gk * vx[k].cos());
            }
            &Op::Cos(x) => {
                let vx = self.val(x);
                self.acc_bcast(grads, x, g, |k, gk| -gk * vx[k].sin());
            }
            &Op::Abs(x) => {
                let vx = self.val(x);
                self.acc_bcast(grads, x, g, |k, gk| {
                    if vx[k] > T::zero() {
                        gk
                    } else if vx[k] < T::zero() {
                        -gk
                    } else {
                        T::zero()
                    }
                });
            }
            &Op::Square(x) => {
                let vx = self.val(x);
                self.acc_bcast(grads, x, g, |k, gk| gk * T::lit(2.0) * vx[k]);
            }
            &Op::Atan2(yy, xx) => {
                let (vy, vx) = (self.val(yy), self.val(xx));
                let r2 = |k: usize| vx[k] * vx[k] + vy[k] * vy[k];
                self.acc_bcast(grads, yy, g, |k, gk| if r2(k) > T::zero() { gk * vx[k] / r2(k) } else { T::zero() });
                self.acc_bcast(grads, xx, g, |k, gk| if r2(k) > T::zero() { -gk * vy[k] / r2(k) } else { T::zero() });
            }
            Op::Softmax(x) => {
                let (r, c) = self.nodes[idx].value.dims2();
                if let Some(gx) = self.acc(grads, *x) {
                    for i in 0..r {
                        let yr = &y[i * c..(i + 1) * c];
                        let gr = &g[i * c..(i + 1) * c];
                        let dot: T = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
                        for j in 0..c {
                            gx[i * c + j] += yr[j] * (gr[j] - dot);
                        }
                    }
                }
            }
            Op::LayerNorm { x, gain, bias, xhat, rstd } => {
                let (r, c) = self.nodes[idx].value.dims2();
                let vg = self.val(*gain);
                if let Some(gg) = self.acc(grads, *gain) {
                    for (k, &gk) in g.iter().enumerate() {
                        gg[k % c] += gk * xhat[k];
                    }
                }
                if let Some(gb) = self.acc(grads, *bias) {
                    for (k, &gk) in g.iter().enumerate() {
                        gb[k % c] += gk;
                    }
                }
                if let Some(gx) = self.acc(grads, *x) {
                    let cn = T::from_usize(c).expect("usize");
                    let mut dxhat = vec![T::zero(); c];
                    for i in 0..r {
                        let mut s1 = T::zero();
                        let mut s2 = T::zero();
                        for j in 0..c {
                            let d = g[i * c + j] * vg[j];
                            dxhat[j] = d;
                            s1 += d;
                            s2 += d * xhat[i * c + j];
                        }
                        for j in 0..c {
                            gx[i * c + j] += rstd[i] / cn * (cn * dxhat[j] - s1 - xhat[i * c + j] * s2);
                        }
                    }
                }
            }
            &Op::SliceCols { x, start } => {
                let (r, len) = self.nodes[idx].value.dims2();
                let c = self.nodes[x].value.dims2().1;
                if let Some(gx) = self.acc(grads, x) {
                    for i in 0..r {
                        for j in 0..len {
                            gx[i * c + start + j] += g[i * len + j];
                        }
                    }
                }
            }
            Op::ConcatCols(parts) => {
                let (r, total) = self.nodes[idx].value.dims2();
                let mut off = 0;
                for &p in parts {
                    let w = self.nodes[p].value.dims2().1;
                    if let Some(gp) = self.acc(grads, p) {
                        for i in 0..r {
                            for j in 0..w {
                                gp[i * w + j] += g[i * total + off + j];
                            }
                        }
                    }
                    off += w;
                }
            }
            &Op::SliceRows { x, start } => {
                let c = self.nodes[x].value.dims2().1;
                if let Some(gx) = self.acc(grads, x) {
                    for (d, &gk) in gx[start * c..start * c + g.len()].iter_mut().zip(g) {
                        *d += gk;
                    }
                }
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for &p in parts {
                    let n = self.nodes[p].value.numel();
                    if let Some(gp) = self.acc(grads, p) {
                        for (d, &gk) in gp.iter_mut().zip(&g[off..off + n]) {
                            *d += gk;
                        }
                    }
                    off += n;
                }
            }
            &Op::Reshape(x) => self.acc_bcast(grads, x, g, |_, gk| gk),
            Op::GatherRows { x, rows } => {
                let c = self.nodes[*x].value.dims2().1;
                if let Some(gx) = self.acc(grads, *x) {
                    for (i, &row) in rows.iter().enumerate() {
                        for j in 0..c {
                            gx[row * c + j] += g[i * c + j];
                        }
                    }
                }
            }
            &Op::Index { x, at } => {
                if let Some(gx) = self.acc(grads, x) {
                    gx[at] += g[0];
                }
            }
            Op::Stack(parts) => {
                for (k, &p) in parts.iter().enumerate() {
                    if let Some(gp) = self.acc(grads, p) {
                        gp[0] += g[k];
                    }
                }
            }
            &Op::Sum(x) => {
                let g0 = g[0];
                if let Some(gx) = self.acc(grads, x) {
                    gx.iter_mut().for_each(|d| *d += g0);
                }
            }
            Op::Focal { logits, targets, alpha, gamma } => {
                let vl = self.val(*logits);
                let g0 = g[0];
                if let Some(gl) = self.acc(grads, *logits) {
                    for (k, d) in gl.iter_mut().enumerate() {
                        *d += g0 * focal_term(vl[k], targets[k], *alpha, *gamma).1;
                    }
                }
            }
            Op::Chamfer { a, b, nn_ab, nn_ba } => {
                let (pa, pb) = (self.val(*a), self.val(*b));
                let na = pa.len() / 2;
                let nb = pb.len() / 2;
                let half = T::lit(0.5) * g[0];
                let wa = half / T::from_usize(na).expect("usize");
                let wb = half / T::from_usize(nb).expect("usize");
                // d|p - q| / dp = (p - q) / |p - q|
                let mut da = vec![T::zero(); pa.len()];
                let mut db = vec![T::zero(); pb.len()];
                for (i, &j) in nn_ab.iter().enumerate() {
                    let (dx, dy) = (pa[2 * i] - pb[2 * j], pa[2 * i + 1] - pb[2 * j + 1]);
                    let d = (dx * dx + dy * dy).sqrt();
                    if d > T::zero() {
                        da[2 * i] += wa * dx / d;
                        da[2 * i + 1] += wa * dy / d;
                        db[2 * j] -= wa * dx / d;
                        db[2 * j + 1] -= wa * dy / d;
                    }
                }
                for (j, &i) in nn_ba.iter().enumerate() {
                    let (dx, dy) = (pb[2 * j] - pa[2 * i], pb[2 * j + 1] - pa[2 * i + 1]);
                    let d = (dx * dx + dy * dy).sqrt();
                    if d > T::zero() {
                        db[2 * j] += wb * dx / d;
                        db[2 * j + 1] += wb * dy / d;
                        da[2 * i] -= wb * dx / d;
                        da[2 * i + 1] -= wb * dy / d;
                    }
                }
                if let Some(ga) = self.acc(grads, *a) {
                    ga.iter_mut().zip(&da).for_each(|(x, &d)| *x += d);
                }
                if let Some(gb) = self.acc(grads, *b) {
                    gb.iter_mut().zip(&db).for_each(|(x, &d)| *x += d);
                }
            }
        }
    }
}

#[inline]
pub(crate) fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

/// `log(sigmoid(x))`, stable for large |x|.
#[inline]
fn log_sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        -(-x).exp().ln_1p()
    } else {
        x - x.exp().ln_1p()
    }
}

/// Focal loss value and derivative w.r.t. the logit for one element.
fn focal_term<T: Scalar>(x: T, target: T, alpha: T, gamma: T) -> (T, T) {
    let p = sigmoid(x);
    let one = T::one();
    if target > T::lit(0.5) {
        // alpha (1-p)^g (-log p)
        let nlp = -log_sigmoid(x);
        let w = (one - p).powf(gamma);
        let val = alpha * w * nlp;
        let d = alpha * w * (-gamma * p * nlp - (one - p));
        (val, d)
    } else {
        // (1-alpha) p^g (-log(1-p)),  log(1-p) = log_sigmoid(-x)
        let nl1p = -log_sigmoid(-x);
        let w = p.powf(gamma);
        let val = (one - alpha) * w * nl1p;
        let d = (one - alpha) * w * (gamma * (one - p) * nl1p + p);
        (val, d)
    }
}

/// Nearest neighbour in `to` for every point of `from`, plus the sum of distances.
fn nearest<T: Scalar>(from: &[T], to: &[T]) -> (Vec<usize>, T) {
    let mut idx = Vec::with_capacity(from.len() / 2);
    let mut total = T::zero();
    for p in from.chunks_exact(2) {
        let mut best = T::infinity();
        let mut bi = 0;
        for (j, q) in to.chunks_exact(2).enumerate() {
            let (dx, dy) = (p[0] - q[0], p[1] - q[1]);
            let d2 = dx * dx + dy * dy;
            if d2 < best {
                best = d2;
                bi = j;
            }
        }
        idx.push(bi);
        total += best.sqrt();
    }
    (idx, total)
}
