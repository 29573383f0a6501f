//! Bipartite matching between predictions and ground truth, and the
//! training losses.
//!
//! The matching cost mixes a focal classification term, an unmasked L1 term
//! and the best Chamfer distance over all four kind readings of the
//! prediction. The losses mask L1 to the ground-truth kind's slots and sample
//! the prediction under the ground-truth kind for Chamfer.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::denoise::DenoiseBatch;
use crate::geometry::{
    arc_sweep, chamfer, circumcircle, param_mask, sample_points, ParamVector, Primitive, PrimitiveKind, CD_SAMPLES,
};
use crate::model::{ForwardVars, QueryPrediction};
use crate::numcore::{Array, Graph, Var};
use crate::scalar::Scalar;

pub const FOCAL_ALPHA: f64 = 0.25;
pub const FOCAL_GAMMA: f64 = 2.0;
const PROB_CLAMP: f64 = 1e-8;

#[derive(Debug, Error, PartialEq)]
pub enum AssignmentError {
    #[error("{gts} ground-truth objects exceed {queries} queries")]
    SizeError { gts: usize, queries: usize },
    #[error("cost matrix entry ({row}, {col}) is not finite")]
    NonFinite { row: usize, col: usize },
    #[error("cost matrix rows have unequal lengths")]
    Ragged,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CostWeights {
    pub class: f64,
    pub param: f64,
    pub cd: f64,
}

impl Default for CostWeights {
    fn default() -> Self {
        Self { class: 2.0, param: 2.0, cd: 5.0 }
    }
}

/// `assignment[j]` is the query matched to ground-truth object `j`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Assignment(pub Vec<usize>);

impl Assignment {
    pub fn total(&self, costs: &[Vec<f64>]) -> f64 {
        self.0.iter().enumerate().map(|(j, &c)| costs[j][c]).sum()
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// Queries that received no ground-truth object, in increasing order.
    pub fn unmatched(&self, n_queries: usize) -> Vec<usize> {
        let mut used = vec![false; n_queries];
        for &c in &self.0 {
            used[c] = true;
        }
        (0..n_queries).filter(|&i| !used[i]).collect()
    }
}

/// `alpha (1-p)^2 (-ln p) - (1-alpha) p^2 (-ln(1-p))` with `p` clamped to `[1e-8, 1-1e-8]`.
pub fn focal_cost(p: f64) -> f64 {
    let p = p.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP);
    let pos = FOCAL_ALPHA * (1.0 - p).powf(FOCAL_GAMMA) * -p.ln();
    let neg = (1.0 - FOCAL_ALPHA) * p.powf(FOCAL_GAMMA) * -(1.0 - p).ln();
    pos - neg
}

pub fn classification_cost(probs: &[f64; 4], gt_kind: PrimitiveKind) -> f64 {
    focal_cost(probs[gt_kind.index()])
}

/// Sum of absolute differences over all six slots.
pub fn l1_cost(pred: &ParamVector, gt: &ParamVector) -> f64 {
    pred.iter().zip(gt).map(|(a, b)| (a - b).abs()).sum()
}

fn kind_samples(params: &ParamVector) -> [Vec<[f64; 2]>; 4] {
    PrimitiveKind::ALL.map(|k| sample_points(k, params, CD_SAMPLES))
}

fn min_chamfer(pred_samples: &[Vec<[f64; 2]>; 4], gt_samples: &[[f64; 2]]) -> f64 {
    pred_samples
        .iter()
        .map(|s| chamfer(s, gt_samples).expect("samples are nonempty"))
        .fold(f64::INFINITY, f64::min)
}

/// Smallest Chamfer distance to `gt` over the four kind readings of `pred`.
pub fn chamfer_cost(pred: &ParamVector, gt: &Primitive) -> f64 {
    min_chamfer(&kind_samples(pred), &gt.sample(CD_SAMPLES))
}

/// `K x N` matrix `w_c cost_c + w_p cost_p + w_cd cost_cd`.
pub fn cost_matrix(preds: &[QueryPrediction], gts: &[Primitive], w: &CostWeights) -> Result<Vec<Vec<f64>>, AssignmentError> {
    if gts.len() > preds.len() {
        return Err(AssignmentError::SizeError { gts: gts.len(), queries: preds.len() });
    }
    let pred_samples: Vec<[Vec<[f64; 2]>; 4]> = preds.iter().map(|p| kind_samples(&p.params)).collect();
    let probs: Vec<[f64; 4]> = preds.iter().map(QueryPrediction::probabilities).collect();
    Ok(gts
        .iter()
        .map(|gt| {
            let gs = gt.sample(CD_SAMPLES);
            preds
                .iter()
                .enumerate()
                .map(|(i, p)| {
                    w.class * classification_cost(&probs[i], gt.kind)
                        + w.param * l1_cost(&p.params, &gt.params)
                        + w.cd * min_chamfer(&pred_samples[i], &gs)
                })
                .collect()
        })
        .collect())
}

fn check_costs(costs: &[Vec<f64>]) -> Result<(usize, usize), AssignmentError> {
    let k = costs.len();
    let n = costs.first().map_or(0, Vec::len);
    if costs.iter().any(|r| r.len() != n) {
        return Err(AssignmentError::Ragged);
    }
    if k > n {
        return Err(AssignmentError::SizeError { gts: k, queries: n });
    }
    for (row, r) in costs.iter().enumerate() {
        if let Some(col) = r.iter().position(|v| !v.is_finite()) {
            return Err(AssignmentError::NonFinite { row, col });
        }
    }
    Ok((k, n))
}

/// Shortest augmenting path solver for `K <= N`: returns the row-to-column
/// map and dual potentials `(u, v)` with `c[i][j] - u[i] - v[j] >= 0`,
/// equality on matched edges and `v[j] < 0` only on matched columns.
fn solve(costs: &[Vec<f64>], rows: &[usize], cols: &[usize]) -> (Vec<usize>, Vec<f64>, Vec<f64>) {
    let (k, n) = (rows.len(), cols.len());
    let c = |i: usize, j: usize| costs[rows[i - 1]][cols[j - 1]];
    let mut u = vec![0.0; k + 1];
    let mut v = vec![0.0; n + 1];
    let mut owner = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for i in 1..=k {
        owner[0] = i;
        let mut j0 = 0;
        let mut minv = vec![f64::INFINITY; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = owner[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=n {
                if !used[j] {
                    let cur = c(i0, j) - u[i0] - v[j];
                    if cur < minv[j] {
                        minv[j] = cur;
                        way[j] = j0;
                    }
                    if minv[j] < delta {
                        delta = minv[j];
                        j1 = j;
                    }
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[owner[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if owner[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            owner[j0] = owner[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut assign = vec![0; k];
    for j in 1..=n {
        if owner[j] != 0 {
            assign[owner[j] - 1] = j - 1;
        }
    }
    (assign, u[1..].to_vec(), v[1..].to_vec())
}

fn optimum(costs: &[Vec<f64>], rows: &[usize], cols: &[usize]) -> f64 {
    if rows.is_empty() {
        return 0.0;
    }
    let (a, _, _) = solve(costs, rows, cols);
    a.iter().zip(rows).map(|(&c, &r)| costs[r][cols[c]]).sum()
}

/// Minimum-cost injective assignment of the `K` rows into the `N` columns.
/// Among optimal assignments the lexicographically smallest column vector is returned.
pub fn hungarian(costs: &[Vec<f64>]) -> Result<Assignment, AssignmentError> {
    let (k, n) = check_costs(costs)?;
    if k == 0 {
        return Ok(Assignment(Vec::new()));
    }
    let all_rows: Vec<usize> = (0..k).collect();
    let all_cols: Vec<usize> = (0..n).collect();
    let (mut assign, u, v) = solve(costs, &all_rows, &all_cols);
    let best: f64 = assign.iter().enumerate().map(|(j, &c)| costs[j][c]).sum();
    let scale = costs.iter().flatten().fold(1.0f64, |m, x| m.max(x.abs()));
    let tol = 1e-9 * scale * k as f64;

    // An optimal assignment uses only tight edges, so a smaller column for row
    // j is worth testing only where the reduced cost vanishes.
    let mut prefix_cost = 0.0;
    for j in 0..k {
        let taken: Vec<usize> = assign[..j].to_vec();
        for c in 0..assign[j] {
            if taken.contains(&c) || (costs[j][c] - u[j] - v[c]).abs() > tol {
                continue;
            }
            let rest_rows: Vec<usize> = (j + 1..k).collect();
            let rest_cols: Vec<usize> = (0..n).filter(|col| *col != c && !taken.contains(col)).collect();
            let total = prefix_cost + costs[j][c] + optimum(costs, &rest_rows, &rest_cols);
            if total <= best + tol {
                let (tail, _, _) = solve(costs, &rest_rows, &rest_cols);
                assign[j] = c;
                for (t, &col) in tail.iter().enumerate() {
                    assign[j + 1 + t] = rest_cols[col];
                }
                break;
            }
        }
        prefix_cost += costs[j][assign[j]];
    }
    Ok(Assignment(assign))
}

/// Constant `6 x 2n` matrix `B` with `params @ B` = interleaved sample coordinates,
/// for the kinds whose samples are linear in the parameters.
fn linear_sampler(kind: PrimitiveKind, n: usize, polyline: bool) -> (Vec<f64>, usize) {
    let frac = |i: usize, n: usize| if n == 1 { 0.5 } else { i as f64 / (n - 1) as f64 };
    let count = if kind == PrimitiveKind::Point { 1 } else { n };
    let mut b = vec![0.0; 6 * 2 * count];
    let mut set = |slot: usize, col: usize, v: f64| b[slot * 2 * count + col] += v;
    for i in 0..count {
        let (cx, cy) = (2 * i, 2 * i + 1);
        match kind {
            PrimitiveKind::Point => {
                set(0, cx, 1.0);
                set(1, cy, 1.0);
            }
            PrimitiveKind::Line => {
                let t = frac(i, n);
                set(0, cx, 1.0 - t);
                set(2, cx, t);
                set(1, cy, 1.0 - t);
                set(3, cy, t);
            }
            PrimitiveKind::Circle => {
                let th = std::f64::consts::TAU * i as f64 / n as f64;
                set(0, cx, 1.0);
                set(2, cx, th.cos());
                set(1, cy, 1.0);
                set(2, cy, th.sin());
            }
            PrimitiveKind::Arc => {
                debug_assert!(polyline);
                let t = frac(i, n);
                let (a, s) = if t <= 0.5 { (0, t * 2.0) } else { (2, t * 2.0 - 1.0) };
                set(a, cx, 1.0 - s);
                set(a + 2, cx, s);
                set(a + 1, cy, 1.0 - s);
                set(a + 3, cy, s);
            }
        }
    }
    (b, count)
}

/// Differentiable sample points (`n x 2`) of a `1 x 6` parameter row read as `kind`.
/// Arcs branch on the current values: collinear points use the polyline
/// reading and the sweep's multiple of 2 pi is held fixed.
pub fn sample_var<T: Scalar>(g: &mut Graph<T>, params: Var, kind: PrimitiveKind, n: usize) -> Var {
    let values: ParamVector = std::array::from_fn(|k| g.value(params).data()[k].as_f64());
    if kind == PrimitiveKind::Arc {
        let (s, m, e) = ([values[0], values[1]], [values[2], values[3]], [values[4], values[5]]);
        if let Ok((center, _)) = circumcircle(s, m, e) {
            let (_, sweep) = arc_sweep(center, s, m, e);
            return arc_var(g, params, n, sweep);
        }
    }
    let (b, count) = linear_sampler(kind, n, true);
    let bm = g.constant(Array::from_f64(&[6, 2 * count], &b).expect("sampler shape"));
    let flat = g.matmul(params, bm);
    g.reshape(flat, &[count, 2])
}

fn arc_var<T: Scalar>(g: &mut Graph<T>, params: Var, n: usize, sweep: f64) -> Var {
    let p: Vec<Var> = (0..6).map(|k| g.index(params, k)).collect();
    let bx = g.sub(p[2], p[0]);
    let by = g.sub(p[3], p[1]);
    let cx = g.sub(p[4], p[0]);
    let cy = g.sub(p[5], p[1]);
    let cross = {
        let l = g.mul(bx, cy);
        let r = g.mul(by, cx);
        let d = g.sub(l, r);
        g.scale(d, T::lit(2.0))
    };
    let b2 = {
        let x = g.square(bx);
        let y = g.square(by);
        g.add(x, y)
    };
    let c2 = {
        let x = g.square(cx);
        let y = g.square(cy);
        g.add(x, y)
    };
    let ux = {
        let l = g.mul(cy, b2);
        let r = g.mul(by, c2);
        let num = g.sub(l, r);
        g.div(num, cross)
    };
    let uy = {
        let l = g.mul(bx, c2);
        let r = g.mul(cx, b2);
        let num = g.sub(l, r);
        g.div(num, cross)
    };
    let center_x = g.add(p[0], ux);
    let center_y = g.add(p[1], uy);
    let radius = {
        let x = g.square(ux);
        let y = g.square(uy);
        let s = g.add(x, y);
        g.sqrt(s)
    };
    let start = {
        let y = g.neg(uy);
        let x = g.neg(ux);
        g.atan2(y, x)
    };
    let end = {
        let y = g.sub(p[5], center_y);
        let x = g.sub(p[4], center_x);
        g.atan2(y, x)
    };
    let start_v = g.scalar(start).as_f64();
    let end_v = g.scalar(end).as_f64();
    // The sweep is end - start plus a multiple of 2 pi, held fixed under differentiation.
    let turns = ((sweep - (end_v - start_v)) / std::f64::consts::TAU).round() * std::f64::consts::TAU;
    let sweep_var = {
        let d = g.sub(end, start);
        g.add_const(d, T::lit(turns))
    };
    let frac: Vec<f64> = (0..n).map(|i| if n == 1 { 0.5 } else { i as f64 / (n - 1) as f64 }).collect();
    let tvec = g.constant(Array::from_f64(&[n, 1], &frac).expect("fractions"));
    let theta = {
        let s = g.mul(tvec, sweep_var);
        g.add(s, start)
    };
    let cos = g.cos(theta);
    let sin = g.sin(theta);
    let xs = {
        let rc = g.mul(cos, radius);
        g.add(rc, center_x)
    };
    let ys = {
        let rs = g.mul(sin, radius);
        g.add(rs, center_y)
    };
    g.concat_cols(&[xs, ys])
}

fn constant_points<T: Scalar>(g: &mut Graph<T>, pts: &[[f64; 2]]) -> Var {
    let flat: Vec<f64> = pts.iter().flatten().copied().collect();
    g.constant(Array::from_f64(&[pts.len(), 2], &flat).expect("points"))
}

/// One prediction row paired with one ground-truth object.
#[derive(Clone, Copy, Debug)]
struct Pair {
    row: usize,
    gt: usize,
}

fn focal_sum<T: Scalar>(g: &mut Graph<T>, logits: Var, rows: &[usize], targets: &[Option<PrimitiveKind>]) -> Var {
    let sel = g.gather_rows(logits, rows);
    let mut t = vec![T::zero(); rows.len() * 4];
    for (r, target) in targets.iter().enumerate() {
        if let Some(k) = target {
            t[r * 4 + k.index()] = T::one();
        }
    }
    g.sigmoid_focal(sel, &t, T::lit(FOCAL_ALPHA), T::lit(FOCAL_GAMMA))
}

fn param_sum<T: Scalar>(g: &mut Graph<T>, params: Var, pairs: &[Pair], gts: &[Primitive]) -> Var {
    let rows: Vec<usize> = pairs.iter().map(|p| p.row).collect();
    let sel = g.gather_rows(params, &rows);
    let target: Vec<f64> = pairs.iter().flat_map(|p| gts[p.gt].params).collect();
    let mask: Vec<f64> = pairs.iter().flat_map(|p| param_mask(gts[p.gt].kind)).collect();
    let tv = g.constant(Array::from_f64(&[pairs.len(), 6], &target).expect("targets"));
    let mv = g.constant(Array::from_f64(&[pairs.len(), 6], &mask).expect("mask"));
    let d = g.sub(sel, tv);
    let d = g.abs(d);
    let d = g.mul(d, mv);
    g.sum(d)
}

fn cd_sum<T: Scalar>(g: &mut Graph<T>, params: Var, pairs: &[Pair], gts: &[Primitive]) -> Var {
    let terms: Vec<Var> = pairs
        .iter()
        .map(|p| {
            let gt = &gts[p.gt];
            let row = g.slice_rows(params, p.row, 1);
            let pred = sample_var(g, row, gt.kind, CD_SAMPLES);
            let target = constant_points(g, &gt.sample(CD_SAMPLES));
            g.chamfer(pred, target)
        })
        .collect();
    let stacked = g.stack(&terms);
    g.sum(stacked)
}

/// The three loss terms of one query set, each already divided by `K`.
#[derive(Clone, Copy, Debug)]
pub struct LossTerms {
    pub class: Var,
    pub param: Var,
    pub cd: Var,
}

impl LossTerms {
    pub fn weighted<T: Scalar>(&self, g: &mut Graph<T>, w: &CostWeights) -> Var {
        let c = g.scale(self.class, T::lit(w.class));
        let p = g.scale(self.param, T::lit(w.param));
        let d = g.scale(self.cd, T::lit(w.cd));
        let s = g.add(c, p);
        g.add(s, d)
    }

    pub fn values<T: Scalar>(&self, g: &Graph<T>) -> [f64; 3] {
        [g.scalar(self.class).as_f64(), g.scalar(self.param).as_f64(), g.scalar(self.cd).as_f64()]
    }
}

fn zero<T: Scalar>(g: &mut Graph<T>) -> Var {
    g.constant_scalar(T::zero())
}

/// Matching-part losses. Focal loss runs over all `N` matching queries
/// (one-hot targets for matched queries, zeros otherwise); L1 and Chamfer over
/// the matched pairs. Everything is divided by `K`.
pub fn matching_losses<T: Scalar>(
    g: &mut Graph<T>,
    out: &ForwardVars,
    n_queries: usize,
    assignment: &Assignment,
    gts: &[Primitive],
) -> LossTerms {
    let k = gts.len();
    let rows: Vec<usize> = (out.n_denoise..out.n_denoise + n_queries).collect();
    let mut targets = vec![None; n_queries];
    for (j, &q) in assignment.0.iter().enumerate() {
        targets[q] = Some(gts[j].kind);
    }
    let class = focal_sum(g, out.logits, &rows, &targets);
    if k == 0 {
        let (param, cd) = (zero(g), zero(g));
        return LossTerms { class, param, cd };
    }
    let pairs: Vec<Pair> = assignment.0.iter().enumerate().map(|(j, &q)| Pair { row: out.n_denoise + q, gt: j }).collect();
    let param = param_sum(g, out.params, &pairs, gts);
    let cd = cd_sum(g, out.params, &pairs, gts);
    let inv_k = T::lit(1.0 / k as f64);
    LossTerms { class: g.scale(class, inv_k), param: g.scale(param, inv_k), cd: g.scale(cd, inv_k) }
}

/// Denoise-part losses: each active slot is paired with its known source
/// object; per-group sums are divided by `K`, then averaged over groups.
/// Padding contributes nothing. Returns `None` when there are no groups.
pub fn denoise_losses<T: Scalar>(
    g: &mut Graph<T>,
    out: &ForwardVars,
    batch: &DenoiseBatch,
    image: usize,
    gts: &[Primitive],
) -> Option<LossTerms> {
    let slots = &batch.images[image].slots;
    let pairs: Vec<Pair> = slots.iter().enumerate().filter_map(|(row, s)| s.gt.map(|gt| Pair { row, gt })).collect();
    if batch.groups == 0 || pairs.is_empty() {
        return None;
    }
    let rows: Vec<usize> = pairs.iter().map(|p| p.row).collect();
    let targets: Vec<Option<PrimitiveKind>> = pairs.iter().map(|p| Some(gts[p.gt].kind)).collect();
    let class = focal_sum(g, out.logits, &rows, &targets);
    let param = param_sum(g, out.params, &pairs, gts);
    let cd = cd_sum(g, out.params, &pairs, gts);
    let norm = T::lit(1.0 / (gts.len() * batch.groups) as f64);
    Some(LossTerms { class: g.scale(class, norm), param: g.scale(param, norm), cd: g.scale(cd, norm) })
}

/// Weighted matching loss plus, when present, the weighted denoise loss.
pub fn total_loss<T: Scalar>(g: &mut Graph<T>, matching: &LossTerms, denoise: Option<&LossTerms>, w: &CostWeights) -> Var {
    let m = matching.weighted(g, w);
    match denoise {
        Some(d) => {
            let dv = d.weighted(g, w);
            g.add(m, dv)
        }
        None => m,
    }
}
