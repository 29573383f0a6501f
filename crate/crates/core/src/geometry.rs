//! Primitive data model, point sampling and Chamfer distance.
//!
//! Every primitive is a kind tag plus a six-slot parameter vector:
//!
//! | kind   | slots                                  |
//! |--------|----------------------------------------|
//! | Line   | x1 y1 x2 y2 0 0                        |
//! | Circle | x y r 0 0 0                            |
//! | Arc    | x_start y_start x_mid y_mid x_end y_end |
//! | Point  | x y 0 0 0 0                            |

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::scalar::Scalar;

/// Points sampled per Line/Circle/Arc wherever Chamfer distance is computed.
pub const CD_SAMPLES: usize = 32;

/// Triangle-area threshold below which three arc points count as collinear.
pub const COLLINEAR_AREA: f64 = 1e-9;

pub const NUM_KINDS: usize = 4;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeometryError {
    #[error("arc points are collinear (triangle area {0:e})")]
    Collinear(f64),
    #[error("point set is empty")]
    EmptySet,
    #[error("parameter slot {slot} = {value} outside [0, 1]")]
    OutOfRange { slot: usize, value: f64 },
    #[error("non-finite parameter in slot {0}")]
    NonFinite(usize),
    #[error("unknown primitive kind `{0}`")]
    UnknownKind(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PrimitiveKind {
    Line = 0,
    Circle = 1,
    Arc = 2,
    Point = 3,
}

impl PrimitiveKind {
    pub const ALL: [PrimitiveKind; NUM_KINDS] =
        [PrimitiveKind::Line, PrimitiveKind::Circle, PrimitiveKind::Arc, PrimitiveKind::Point];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Self> {
        Self::ALL.get(i).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            PrimitiveKind::Line => "line",
            PrimitiveKind::Circle => "circle",
            PrimitiveKind::Arc => "arc",
            PrimitiveKind::Point => "point",
        }
    }

    /// Number of leading parameter slots the kind uses.
    pub fn used_slots(self) -> usize {
        match self {
            PrimitiveKind::Line => 4,
            PrimitiveKind::Circle => 3,
            PrimitiveKind::Arc => 6,
            PrimitiveKind::Point => 2,
        }
    }
}

impl fmt::Display for PrimitiveKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for PrimitiveKind {
    type Err = GeometryError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| GeometryError::UnknownKind(s.to_string()))
    }
}

/// Binary mask of the slots a kind uses.
pub fn param_mask(kind: PrimitiveKind) -> [f64; 6] {
    let mut m = [0.0; 6];
    m[..kind.used_slots()].fill(1.0);
    m
}

/// Six parameter slots; see the module table for the per-kind layout.
pub type ParamVector = [f64; 6];

/// A primitive whose unused slots are exactly zero.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Primitive {
    pub kind: PrimitiveKind,
    pub params: ParamVector,
}

impl Primitive {
    /// Normalized primitive: every slot must be finite and in `[0, 1]`; unused
    /// slots are zeroed.
    pub fn new(kind: PrimitiveKind, params: ParamVector) -> Result<Self, GeometryError> {
        let p = Self::raw(kind, params)?;
        for (slot, &v) in p.params.iter().enumerate() {
            if !(0.0..=1.0).contains(&v) {
                return Err(GeometryError::OutOfRange { slot, value: v });
            }
        }
        Ok(p)
    }

    /// Primitive in arbitrary (unnormalized) coordinates.
    pub fn raw(kind: PrimitiveKind, mut params: ParamVector) -> Result<Self, GeometryError> {
        let used = kind.used_slots();
        for (slot, v) in params.iter_mut().enumerate() {
            if slot >= used {
                *v = 0.0;
            } else if !v.is_finite() {
                return Err(GeometryError::NonFinite(slot));
            }
        }
        Ok(Self { kind, params })
    }

    pub fn line(x1: f64, y1: f64, x2: f64, y2: f64) -> Self {
        Self { kind: PrimitiveKind::Line, params: [x1, y1, x2, y2, 0.0, 0.0] }
    }

    pub fn circle(x: f64, y: f64, r: f64) -> Self {
        Self { kind: PrimitiveKind::Circle, params: [x, y, r, 0.0, 0.0, 0.0] }
    }

    pub fn arc(start: [f64; 2], mid: [f64; 2], end: [f64; 2]) -> Self {
        Self { kind: PrimitiveKind::Arc, params: [start[0], start[1], mid[0], mid[1], end[0], end[1]] }
    }

    pub fn point(x: f64, y: f64) -> Self {
        Self { kind: PrimitiveKind::Point, params: [x, y, 0.0, 0.0, 0.0, 0.0] }
    }

    pub fn is_normalized(&self) -> bool {
        self.params.iter().all(|v| (0.0..=1.0).contains(v))
            && self.params[self.kind.used_slots()..].iter().all(|&v| v == 0.0)
    }

    pub fn sample(&self, n: usize) -> Vec<[f64; 2]> {
        sample_points(self.kind, &self.params, n)
    }
}

/// Circle through three points.
pub fn circumcircle<T: Scalar>(a: [T; 2], b: [T; 2], c: [T; 2]) -> Result<([T; 2], T), GeometryError> {
    let two = T::lit(2.0);
    let cross = (b[0] - a[0]) * (c[1] - a[1]) - (b[1] - a[1]) * (c[0] - a[0]);
    let area = cross.abs() / two;
    if area.as_f64() < COLLINEAR_AREA {
        return Err(GeometryError::Collinear(area.as_f64()));
    }
    // Solve relative to `a` for better conditioning.
    let (bx, by) = (b[0] - a[0], b[1] - a[1]);
    let (cx, cy) = (c[0] - a[0], c[1] - a[1]);
    let d = two * (bx * cy - by * cx);
    let b2 = bx * bx + by * by;
    let c2 = cx * cx + cy * cy;
    let ux = (cy * b2 - by * c2) / d;
    let uy = (bx * c2 - cx * b2) / d;
    let radius = (ux * ux + uy * uy).sqrt();
    Ok(([ux + a[0], uy + a[1]], radius))
}

/// Start angle and signed sweep of the arc from `start` to `end` passing through `mid`.
pub fn arc_sweep<T: Scalar>(center: [T; 2], start: [T; 2], mid: [T; 2], end: [T; 2]) -> (T, T) {
    let ang = |p: [T; 2]| (p[1] - center[1]).atan2(p[0] - center[0]);
    let tau = T::TAU();
    let wrap = |x: T| {
        let r = x % tau;
        if r < T::zero() {
            r + tau
        } else {
            r
        }
    };
    let (ts, tm, te) = (ang(start), ang(mid), ang(end));
    let to_end = wrap(te - ts);
    let to_mid = wrap(tm - ts);
    if to_mid <= to_end {
        (ts, to_end)
    } else {
        (ts, to_end - tau)
    }
}

fn fraction<T: Scalar>(i: usize, n: usize) -> T {
    if n == 1 {
        T::lit(0.5)
    } else {
        T::from_usize(i).expect("usize") / T::from_usize(n - 1).expect("usize")
    }
}

/// Fallback for degenerate arcs: `n` points along start -> mid -> end, half on each leg.
pub fn polyline_points<T: Scalar>(p: &[T; 6], n: usize) -> Vec<[T; 2]> {
    let half = T::lit(0.5);
    let two = T::lit(2.0);
    (0..n)
        .map(|i| {
            let t: T = fraction(i, n);
            let (a, b, s) = if t <= half { (0, 2, t * two) } else { (2, 4, t * two - T::one()) };
            [p[a] + s * (p[b] - p[a]), p[a + 1] + s * (p[b + 1] - p[a + 1])]
        })
        .collect()
}

/// Samples a primitive. Points yield exactly one sample regardless of `n`.
pub fn sample_points<T: Scalar>(kind: PrimitiveKind, p: &[T; 6], n: usize) -> Vec<[T; 2]> {
    assert!(n >= 1, "sample count must be positive");
    match kind {
        PrimitiveKind::Point => vec![[p[0], p[1]]],
        PrimitiveKind::Line => (0..n)
            .map(|i| {
                let t: T = fraction(i, n);
                [p[0] + t * (p[2] - p[0]), p[1] + t * (p[3] - p[1])]
            })
            .collect(),
        PrimitiveKind::Circle => {
            let nn = T::from_usize(n).expect("usize");
            (0..n)
                .map(|i| {
                    let th = T::TAU() * T::from_usize(i).expect("usize") / nn;
                    [p[0] + p[2] * th.cos(), p[1] + p[2] * th.sin()]
                })
                .collect()
        }
        PrimitiveKind::Arc => {
            let (s, m, e) = ([p[0], p[1]], [p[2], p[3]], [p[4], p[5]]);
            match circumcircle(s, m, e) {
                Ok((c, r)) => {
                    let (t0, sweep) = arc_sweep(c, s, m, e);
                    (0..n)
                        .map(|i| {
                            let th = t0 + sweep * fraction::<T>(i, n);
                            [c[0] + r * th.cos(), c[1] + r * th.sin()]
                        })
                        .collect()
                }
                Err(_) => polyline_points(p, n),
            }
        }
    }
}

/// Symmetric mean nearest-neighbour Euclidean distance.
pub fn chamfer<T: Scalar>(a: &[[T; 2]], b: &[[T; 2]]) -> Result<T, GeometryError> {
    if a.is_empty() || b.is_empty() {
        return Err(GeometryError::EmptySet);
    }
    // One sweep over the distance matrix yields both directed nearest distances.
    let mut col_min = vec![T::infinity(); b.len()];
    let mut ab = T::zero();
    for p in a {
        let mut row_min = T::infinity();
        for (q, cm) in b.iter().zip(col_min.iter_mut()) {
            let d = (p[0] - q[0]) * (p[0] - q[0]) + (p[1] - q[1]) * (p[1] - q[1]);
            row_min = if d < row_min { d } else { row_min };
            *cm = if d < *cm { d } else { *cm };
        }
        ab += row_min.sqrt();
    }
    let ba: T = col_min.into_iter().map(|d| d.sqrt()).sum();
    let n = |len: usize| T::from_usize(len).expect("usize");
    Ok(T::lit(0.5) * (ab / n(a.len()) + ba / n(b.len())))
}

/// Chamfer distance between two primitives, each sampled under its own kind.
pub fn primitive_chamfer(a: &Primitive, b: &Primitive) -> f64 {
    chamfer(&a.sample(CD_SAMPLES), &b.sample(CD_SAMPLES)).expect("samples are nonempty")
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn close(a: [f64; 2], b: [f64; 2], tol: f64) -> bool {
        (a[0] - b[0]).abs() < tol && (a[1] - b[1]).abs() < tol
    }

    #[test]
    fn masks_follow_layout() {
        assert_eq!(param_mask(PrimitiveKind::Line), [1.0, 1.0, 1.0, 1.0, 0.0, 0.0]);
        assert_eq!(param_mask(PrimitiveKind::Circle), [1.0, 1.0, 1.0, 0.0, 0.0, 0.0]);
        assert_eq!(param_mask(PrimitiveKind::Arc), [1.0; 6]);
        assert_eq!(param_mask(PrimitiveKind::Point), [1.0, 1.0, 0.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn kind_order_is_fixed() {
        let idx: Vec<usize> = PrimitiveKind::ALL.iter().map(|k| k.index()).collect();
        assert_eq!(idx, vec![0, 1, 2, 3]);
        assert_eq!("arc".parse::<PrimitiveKind>().unwrap(), PrimitiveKind::Arc);
        assert!("spline".parse::<PrimitiveKind>().is_err());
    }

    #[test]
    fn constructor_zeroes_padding_and_checks_range() {
        let p = Primitive::new(PrimitiveKind::Point, [0.1, 0.2, 0.3, 0.4, 0.5, 0.6]).unwrap();
        assert_eq!(p.params, [0.1, 0.2, 0.0, 0.0, 0.0, 0.0]);
        assert!(Primitive::new(PrimitiveKind::Line, [0.1, 1.2, 0.0, 0.0, 0.0, 0.0]).is_err());
        assert!(Primitive::raw(PrimitiveKind::Line, [f64::NAN, 0.0, 0.0, 0.0, 0.0, 0.0]).is_err());
    }

    #[test]
    fn line_samples_include_endpoints_and_midpoint() {
        let pts = sample_points(PrimitiveKind::Line, &[0.0, 0.0, 1.0, 1.0, 0.0, 0.0], 3);
        assert_eq!(pts, vec![[0.0, 0.0], [0.5, 0.5], [1.0, 1.0]]);
    }

    #[test]
    fn circle_samples_hit_axis_points() {
        let pts = sample_points(PrimitiveKind::Circle, &[0.5, 0.5, 0.25, 0.0, 0.0, 0.0], 4);
        let want = [[0.75, 0.5], [0.5, 0.75], [0.25, 0.5], [0.5, 0.25]];
        for (p, w) in pts.iter().zip(want) {
            assert!(close(*p, w, 1e-15), "{p:?} vs {w:?}");
        }
    }

    #[test]
    fn arc_samples_lie_on_hand_solved_circle() {
        // By hand: the perpendicular bisector of (0,0)-(1,0) is x = 0.5; equidistance from
        // (0,0) and (0.5,0.5) gives y = 0, so center (0.5, 0) and radius 0.5.
        let pts = sample_points(PrimitiveKind::Arc, &[0.0, 0.0, 0.5, 0.5, 1.0, 0.0], 3);
        assert!(close(pts[0], [0.0, 0.0], 1e-12));
        assert!(close(pts[1], [0.5, 0.5], 1e-12));
        assert!(close(pts[2], [1.0, 0.0], 1e-12));
        for p in sample_points::<f64>(PrimitiveKind::Arc, &[0.0, 0.0, 0.5, 0.5, 1.0, 0.0], 17) {
            let r = ((p[0] - 0.5).powi(2) + p[1].powi(2)).sqrt();
            assert!((r - 0.5).abs() < 1e-12);
            assert!(p[1] >= -1e-12, "sample {p:?} on the wrong side");
        }
    }

    #[test]
    fn arc_through_mid_in_clockwise_order() {
        // Same circle, traversed the other way: start (1,0), mid (0.5,0.5), end (0,0).
        let pts = sample_points(PrimitiveKind::Arc, &[1.0, 0.0, 0.5, 0.5, 0.0, 0.0], 5);
        assert!(close(pts[2], [0.5, 0.5], 1e-12));
        // Long way round: mid below the chord.
        let pts = sample_points(PrimitiveKind::Arc, &[0.0, 0.0, 0.5, -0.5, 1.0, 0.0], 5);
        assert!(close(pts[2], [0.5, -0.5], 1e-12));
    }

    #[test]
    fn collinear_arc_falls_back_to_polyline() {
        let pts = sample_points(PrimitiveKind::Arc, &[0.0, 0.0, 0.5, 0.0, 1.0, 0.0], 5);
        assert_eq!(pts, vec![[0.0, 0.0], [0.25, 0.0], [0.5, 0.0], [0.75, 0.0], [1.0, 0.0]]);
    }

    #[test]
    fn point_samples_once() {
        assert_eq!(sample_points(PrimitiveKind::Point, &[0.3, 0.4, 0.0, 0.0, 0.0, 0.0], 32).len(), 1);
    }

    #[test]
    fn circumcircle_examples() {
        let (c, r) = circumcircle([0.0, 0.0], [1.0, 1.0], [2.0, 0.0]).unwrap();
        assert!(close(c, [1.0, 0.0], 1e-12) && (r - 1.0).abs() < 1e-12);
        let (c, r) = circumcircle([0.0, 0.0], [0.5, 0.5], [1.0, 0.0]).unwrap();
        assert!(close(c, [0.5, 0.0], 1e-12) && (r - 0.5).abs() < 1e-12);
        assert!(matches!(circumcircle([0.0, 0.0], [0.5, 0.0], [1.0, 0.0]), Err(GeometryError::Collinear(_))));
    }

    #[test]
    fn chamfer_examples() {
        assert_eq!(chamfer(&[[0.0, 0.0]], &[[0.3, 0.4]]).unwrap(), 0.5);
        let s = [[0.1, 0.2], [0.7, 0.3]];
        assert_eq!(chamfer(&s, &s).unwrap(), 0.0);
        assert_eq!(chamfer::<f64>(&[], &s), Err(GeometryError::EmptySet));
    }

    fn pt() -> impl Strategy<Value = [f64; 2]> {
        (0.0..1.0f64, 0.0..1.0f64).prop_map(|(x, y)| [x, y])
    }

    proptest! {
        #[test]
        fn chamfer_is_symmetric(a in prop::collection::vec(pt(), 1..12), b in prop::collection::vec(pt(), 1..12)) {
            prop_assert!((chamfer(&a, &b).unwrap() - chamfer(&b, &a).unwrap()).abs() < 1e-15);
        }

        #[test]
        fn zero_chamfer_means_same_point_sets(a in prop::collection::vec(pt(), 1..8), b in prop::collection::vec(pt(), 1..8)) {
            if chamfer(&a, &b).unwrap() == 0.0 {
                prop_assert!(a.iter().all(|p| b.contains(p)) && b.iter().all(|p| a.contains(p)));
            }
            let mut c = a.clone();
            c.reverse();
            prop_assert_eq!(chamfer(&a, &c).unwrap(), 0.0);
        }

        #[test]
        fn circumcircle_residual_is_tiny(a in pt(), b in pt(), c in pt()) {
            if let Ok((center, r)) = circumcircle(a, b, c) {
                for p in [a, b, c] {
                    let d = ((p[0] - center[0]).powi(2) + (p[1] - center[1]).powi(2)).sqrt();
                    // absolute tolerance scaled by the radius: near-collinear triples give huge circles
                    prop_assert!((d - r).abs() < 1e-9 * r.max(1.0));
                }
            }
        }

        #[test]
        fn normalized_lines_and_points_sample_inside_unit_square(p in prop::array::uniform6(0.0..=1.0f64)) {
            for kind in [PrimitiveKind::Line, PrimitiveKind::Point] {
                let prim = Primitive::new(kind, p).unwrap();
                for s in prim.sample(CD_SAMPLES) {
                    prop_assert!((0.0..=1.0).contains(&s[0]) && (0.0..=1.0).contains(&s[1]));
                }
            }
        }

        #[test]
        fn arc_samples_stay_in_circle_bounding_box(p in prop::array::uniform6(0.0..=1.0f64)) {
            let prim = Primitive::new(PrimitiveKind::Arc, p).unwrap();
            if let Ok((c, r)) = circumcircle([p[0], p[1]], [p[2], p[3]], [p[4], p[5]]) {
                for s in prim.sample(CD_SAMPLES) {
                    prop_assert!((s[0] - c[0]).abs() <= r * (1.0 + 1e-9) && (s[1] - c[1]).abs() <= r * (1.0 + 1e-9));
                }
            }
        }

        #[test]
        fn padding_slots_stay_zero(kind in 0usize..4, p in prop::array::uniform6(0.0..=1.0f64)) {
            let k = PrimitiveKind::from_index(kind).unwrap();
            let prim = Primitive::new(k, p).unwrap();
            let mask = param_mask(k);
            for i in 0..6 {
                prop_assert_eq!(prim.params[i] * (1.0 - mask[i]), 0.0);
            }
        }
    }
}
