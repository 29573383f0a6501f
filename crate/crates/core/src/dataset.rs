//! Sketch records: procedural generation, JSON ingestion, normalization,
//! filtering and deterministic train/val/test assignment.

use std::path::Path;

use log::warn;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{GeometryError, Primitive, PrimitiveKind, CD_SAMPLES};
use crate::seeds::mix_seed;

pub const MIN_PRIMITIVES: usize = 6;
pub const MAX_PRIMITIVES: usize = 16;

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("sketch has zero extent")]
    DegenerateExtent,
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("schema error{}: {message}", index.map(|i| format!(" in record {i}")).unwrap_or_default())]
    Schema { index: Option<usize>, message: String },
    #[error(transparent)]
    Geometry(#[from] GeometryError),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Sketch {
    pub id: String,
    pub primitives: Vec<Primitive>,
}

impl Sketch {
    pub fn kinds(&self) -> Vec<PrimitiveKind> {
        self.primitives.iter().map(|p| p.kind).collect()
    }

    pub fn len(&self) -> usize {
        self.primitives.len()
    }

    pub fn is_empty(&self) -> bool {
        self.primitives.is_empty()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum FilterVerdict {
    Accept,
    TooFew,
    TooMany,
}

/// Keeps sketches with 6..=16 primitives. Kinds outside the four supported
/// ones cannot be represented and are rejected at parse time.
pub fn filter_sketch(s: &Sketch) -> FilterVerdict {
    match s.primitives.len() {
        n if n < MIN_PRIMITIVES => FilterVerdict::TooFew,
        n if n > MAX_PRIMITIVES => FilterVerdict::TooMany,
        _ => FilterVerdict::Accept,
    }
}

/// Axis-aligned bounds of the sampled geometry and of every control point:
/// `(min, max)`. Control points are included so normalization never clamps them.
pub fn sampled_bounds(prims: &[Primitive]) -> Option<([f64; 2], [f64; 2])> {
    let mut lo = [f64::INFINITY; 2];
    let mut hi = [f64::NEG_INFINITY; 2];
    for p in prims {
        let controls = match p.kind {
            PrimitiveKind::Circle => Vec::new(),
            kind => p.params[..kind.used_slots()].chunks(2).map(|c| [c[0], c[1]]).collect(),
        };
        for q in p.sample(CD_SAMPLES).into_iter().chain(controls) {
            for k in 0..2 {
                lo[k] = lo[k].min(q[k]);
                hi[k] = hi[k].max(q[k]);
            }
        }
    }
    lo[0].is_finite().then_some((lo, hi))
}

/// Centers the sampled bounding box at (0.5, 0.5) and scales its longest side to 1.
pub fn normalize_sketch(raw: &Sketch) -> Result<Sketch, DatasetError> {
    let (lo, hi) = sampled_bounds(&raw.primitives).ok_or(DatasetError::DegenerateExtent)?;
    let extent = (hi[0] - lo[0]).max(hi[1] - lo[1]);
    if extent <= 0.0 {
        return Err(DatasetError::DegenerateExtent);
    }
    let scale = 1.0 / extent;
    let center = [(lo[0] + hi[0]) / 2.0, (lo[1] + hi[1]) / 2.0];
    let map = |v: f64, axis: usize| ((v - center[axis]) * scale + 0.5).clamp(0.0, 1.0);
    let primitives = raw
        .primitives
        .iter()
        .map(|p| {
            let mut q = p.params;
            match p.kind {
                PrimitiveKind::Circle => {
                    q[0] = map(q[0], 0);
                    q[1] = map(q[1], 1);
                    q[2] = (q[2].abs() * scale).clamp(0.0, 1.0);
                }
                kind => {
                    for slot in 0..kind.used_slots() {
                        q[slot] = map(q[slot], slot % 2);
                    }
                }
            }
            Primitive::new(p.kind, q)
        })
        .collect::<Result<Vec<_>, _>>()?;
    Ok(Sketch { id: raw.id.clone(), primitives })
}

#[derive(Deserialize)]
struct RawPrimitive {
    kind: String,
    params: Vec<f64>,
}

#[derive(Deserialize)]
struct RawRecord {
    id: String,
    primitives: Vec<RawPrimitive>,
}

/// Loaded corpus plus the number of records that were skipped.
#[derive(Clone, Debug, Default)]
pub struct Corpus {
    pub sketches: Vec<Sketch>,
    pub skipped: usize,
}

fn convert_record(rec: RawRecord) -> Result<Sketch, String> {
    let primitives = rec
        .primitives
        .into_iter()
        .map(|p| {
            let kind: PrimitiveKind = p.kind.parse().map_err(|e: GeometryError| e.to_string())?;
            let params: [f64; 6] =
                p.params.try_into().map_err(|v: Vec<f64>| format!("expected 6 params, got {}", v.len()))?;
            Primitive::raw(kind, params).map_err(|e| e.to_string())
        })
        .collect::<Result<Vec<_>, _>>()?;
    let sketch = Sketch { id: rec.id, primitives };
    match filter_sketch(&sketch) {
        FilterVerdict::Accept => normalize_sketch(&sketch).map_err(|e| e.to_string()),
        v => Err(format!("filtered out: {v:?}")),
    }
}

/// Parses a JSON array of sketch records. Records with unsupported kinds,
/// wrong parameter counts, degenerate extent or a failing filter are skipped.
pub fn parse_corpus(text: &str) -> Result<Corpus, DatasetError> {
    if text.trim().is_empty() {
        return Ok(Corpus::default());
    }
    let values: Vec<serde_json::Value> = serde_json::from_str(text)
        .map_err(|e| DatasetError::Schema { index: None, message: e.to_string() })?;
    let mut corpus = Corpus::default();
    for (index, value) in values.into_iter().enumerate() {
        let rec: RawRecord = serde_json::from_value(value)
            .map_err(|e| DatasetError::Schema { index: Some(index), message: e.to_string() })?;
        let id = rec.id.clone();
        match convert_record(rec) {
            Ok(s) => corpus.sketches.push(s),
            Err(why) => {
                log::debug!("skipping record {index} ({id}): {why}");
                corpus.skipped += 1;
            }
        }
    }
    if corpus.skipped > 0 {
        warn!("skipped {} malformed or filtered records", corpus.skipped);
    }
    Ok(corpus)
}

pub fn load_corpus(path: &Path) -> Result<Corpus, DatasetError> {
    parse_corpus(&std::fs::read_to_string(path)?)
}

pub fn corpus_to_json(sketches: &[Sketch]) -> String {
    let mut s = serde_json::to_string_pretty(sketches).expect("sketches serialize");
    s.push('\n');
    s
}

pub fn write_corpus(path: &Path, sketches: &[Sketch]) -> Result<(), DatasetError> {
    std::fs::write(path, corpus_to_json(sketches))?;
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorpusSplit {
    pub train: f64,
    pub val: f64,
    pub test: f64,
}

impl Default for CorpusSplit {
    fn default() -> Self {
        Self { train: 0.925, val: 0.025, test: 0.05 }
    }
}

impl CorpusSplit {
    pub fn validate(&self) -> Result<(), String> {
        let parts = [self.train, self.val, self.test];
        if parts.iter().any(|&f| !(0.0..=1.0).contains(&f)) || ((parts.iter().sum::<f64>()) - 1.0).abs() > 1e-9 {
            return Err(format!("split fractions {parts:?} must be in [0,1] and sum to 1"));
        }
        Ok(())
    }

    /// Pure function of `(id, seed)`.
    pub fn assign(&self, id: &str, seed: u64) -> Split {
        let h = id.bytes().fold(mix_seed(seed, 0x5eed), |acc, b| mix_seed(acc, b as u64));
        let u = (h >> 11) as f64 / (1u64 << 53) as f64;
        if u < self.train {
            Split::Train
        } else if u < self.train + self.val {
            Split::Val
        } else {
            Split::Test
        }
    }

    pub fn partition<'a>(&self, sketches: &'a [Sketch], seed: u64) -> [Vec<&'a Sketch>; 3] {
        let mut out: [Vec<&Sketch>; 3] = Default::default();
        for s in sketches {
            let slot = match self.assign(&s.id, seed) {
                Split::Train => 0,
                Split::Val => 1,
                Split::Test => 2,
            };
            out[slot].push(s);
        }
        out
    }
}

/// Jittered coordinate on the coarse 0..=8 grid.
fn grid(rng: &mut ChaCha8Rng, lo: i32, hi: i32) -> f64 {
    rng.random_range(lo..=hi) as f64 + rng.random_range(-0.05..0.05)
}

fn closed_loop(rng: &mut ChaCha8Rng, out: &mut Vec<Primitive>) {
    if rng.random_bool(0.7) {
        let x0 = grid(rng, 0, 5);
        let y0 = grid(rng, 0, 5);
        let x1 = x0 + rng.random_range(1..=3) as f64 + rng.random_range(-0.05..0.05);
        let y1 = y0 + rng.random_range(1..=3) as f64 + rng.random_range(-0.05..0.05);
        let c = [[x0, y0], [x1, y0], [x1, y1], [x0, y1]];
        for i in 0..4 {
            let (a, b) = (c[i], c[(i + 1) % 4]);
            out.push(Primitive::line(a[0], a[1], b[0], b[1]));
        }
    } else {
        loop {
            let v: Vec<[f64; 2]> = (0..3).map(|_| [grid(rng, 0, 8), grid(rng, 0, 8)]).collect();
            let cross = (v[1][0] - v[0][0]) * (v[2][1] - v[0][1]) - (v[1][1] - v[0][1]) * (v[2][0] - v[0][0]);
            if cross.abs() > 1.0 {
                for i in 0..3 {
                    let (a, b) = (v[i], v[(i + 1) % 3]);
                    out.push(Primitive::line(a[0], a[1], b[0], b[1]));
                }
                return;
            }
        }
    }
}

fn random_arc(rng: &mut ChaCha8Rng) -> Primitive {
    let (cx, cy) = (grid(rng, 1, 7), grid(rng, 1, 7));
    let r = rng.random_range(1..=4) as f64 * 0.5 * rng.random_range(0.95..1.05);
    let start = rng.random_range(0.0..std::f64::consts::TAU);
    let sweep = rng.random_range(60f64..270.0).to_radians() * if rng.random_bool(0.5) { 1.0 } else { -1.0 };
    let at = |t: f64| [cx + r * (start + sweep * t).cos(), cy + r * (start + sweep * t).sin()];
    Primitive::arc(at(0.0), at(0.5), at(1.0))
}

/// Deterministic CAD-like sketch: 1-3 closed rectangle/triangle loops,
/// 0-3 circles, 0-3 arcs and 0-2 points on a jittered grid, normalized.
/// Retries until the result passes [`filter_sketch`] and mixes at least two kinds.
pub fn generate_sketch(seed: u64) -> Sketch {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    loop {
        let mut prims = Vec::new();
        for _ in 0..rng.random_range(1..=3) {
            closed_loop(&mut rng, &mut prims);
        }
        for _ in 0..rng.random_range(0..=3) {
            let r = rng.random_range(1..=4) as f64 * 0.5 * rng.random_range(0.95..1.05);
            prims.push(Primitive::circle(grid(&mut rng, 1, 7), grid(&mut rng, 1, 7), r));
        }
        for _ in 0..rng.random_range(0..=3) {
            prims.push(random_arc(&mut rng));
        }
        for _ in 0..rng.random_range(0..=2) {
            prims.push(Primitive::point(grid(&mut rng, 0, 8), grid(&mut rng, 0, 8)));
        }
        let raw = Sketch { id: format!("gen-{seed:016x}"), primitives: prims };
        let mixed = raw.primitives.iter().any(|p| p.kind != PrimitiveKind::Line);
        if mixed && filter_sketch(&raw) == FilterVerdict::Accept {
            if let Ok(s) = normalize_sketch(&raw) {
                return s;
            }
        }
    }
}

/// `count` generated sketches with ids `sk000000`, `sk000001`, ...
pub fn generate_corpus(count: usize, seed: u64) -> Vec<Sketch> {
    (0..count)
        .map(|i| {
            let mut s = generate_sketch(mix_seed(seed, i as u64));
            s.id = format!("sk{i:06}");
            s
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn sketch(prims: Vec<Primitive>) -> Sketch {
        Sketch { id: "t".into(), primitives: prims }
    }

    fn assert_prims_close(a: &Sketch, b: &Sketch, tol: f64) {
        assert_eq!(a.primitives.len(), b.primitives.len());
        for (p, q) in a.primitives.iter().zip(&b.primitives) {
            assert_eq!(p.kind, q.kind);
            for k in 0..6 {
                assert!((p.params[k] - q.params[k]).abs() <= tol, "{p:?} vs {q:?}");
            }
        }
    }

    #[test]
    fn lone_horizontal_line_normalizes_to_unit_width() {
        let s = normalize_sketch(&sketch(vec![Primitive::line(0.0, 0.0, 2.0, 0.0)])).unwrap();
        assert_eq!(s.primitives[0].params, [0.0, 0.5, 1.0, 0.5, 0.0, 0.0]);
    }

    #[test]
    fn lone_circle_fills_unit_square() {
        let s = normalize_sketch(&sketch(vec![Primitive::circle(10.0, 10.0, 1.0)])).unwrap();
        let p = s.primitives[0].params;
        assert!((p[0] - 0.5).abs() < 1e-12 && (p[1] - 0.5).abs() < 1e-12 && (p[2] - 0.5).abs() < 1e-12);
    }

    #[test]
    fn zero_extent_is_rejected() {
        let s = sketch(vec![Primitive::point(1.0, 1.0), Primitive::point(1.0, 1.0)]);
        assert!(matches!(normalize_sketch(&s), Err(DatasetError::DegenerateExtent)));
    }

    #[test]
    fn filter_boundaries() {
        let lines = |n: usize| sketch(vec![Primitive::line(0.0, 0.0, 1.0, 1.0); n]);
        assert_eq!(filter_sketch(&lines(5)), FilterVerdict::TooFew);
        assert_eq!(filter_sketch(&lines(6)), FilterVerdict::Accept);
        assert_eq!(filter_sketch(&lines(16)), FilterVerdict::Accept);
        assert_eq!(filter_sketch(&lines(17)), FilterVerdict::TooMany);
    }

    #[test]
    fn generation_is_deterministic() {
        assert_eq!(corpus_to_json(&[generate_sketch(1)]), corpus_to_json(&[generate_sketch(1)]));
        assert_ne!(generate_sketch(1), generate_sketch(2));
    }

    #[test]
    fn generated_sketches_pass_filter_and_favor_lines() {
        let mut counts = [0usize; 4];
        for seed in 0..10_000u64 {
            let s = generate_sketch(seed);
            assert_eq!(filter_sketch(&s), FilterVerdict::Accept, "seed {seed}");
            assert!(s.primitives.iter().all(Primitive::is_normalized), "seed {seed}");
            for p in &s.primitives {
                counts[p.kind.index()] += 1;
            }
        }
        assert!(counts[0] > counts[1] && counts[0] > counts[2] && counts[0] > counts[3], "{counts:?}");
    }

    #[test]
    fn corpus_parsing_skips_unsupported_records() {
        let good = corpus_to_json(&generate_corpus(3, 7));
        let c = parse_corpus(&good).unwrap();
        assert_eq!((c.sketches.len(), c.skipped), (3, 0));

        let mut v: serde_json::Value = serde_json::from_str(&good).unwrap();
        v[1]["primitives"][0]["kind"] = "spline".into();
        let c = parse_corpus(&v.to_string()).unwrap();
        assert_eq!((c.sketches.len(), c.skipped), (2, 1));

        assert_eq!(parse_corpus("").unwrap().sketches.len(), 0);
        assert!(matches!(parse_corpus("{}"), Err(DatasetError::Schema { index: None, .. })));
        assert!(matches!(parse_corpus("[{\"id\": 3}]"), Err(DatasetError::Schema { index: Some(0), .. })));
    }

    #[test]
    fn split_is_pure_and_roughly_proportional() {
        let split = CorpusSplit::default();
        split.validate().unwrap();
        let ids: Vec<String> = (0..4000).map(|i| format!("sk{i:06}")).collect();
        let a: Vec<Split> = ids.iter().map(|id| split.assign(id, 3)).collect();
        let b: Vec<Split> = ids.iter().map(|id| split.assign(id, 3)).collect();
        assert_eq!(a, b);
        let train = a.iter().filter(|&&s| s == Split::Train).count() as f64 / 4000.0;
        assert!((train - 0.925).abs() < 0.02, "train fraction {train}");
        assert!(CorpusSplit { train: 0.5, val: 0.2, test: 0.2 }.validate().is_err());
    }

    proptest! {
        #[test]
        fn normalization_is_idempotent(seed in 0u64..500) {
            let s = generate_sketch(seed);
            assert_prims_close(&normalize_sketch(&s).unwrap(), &s, 1e-12);
        }

        #[test]
        fn normalization_ignores_translation_and_uniform_scale(
            seed in 0u64..200, dx in -50.0..50.0f64, dy in -50.0..50.0f64, k in 0.1..20.0f64
        ) {
            let s = generate_sketch(seed);
            let moved = Sketch {
                id: s.id.clone(),
                primitives: s.primitives.iter().map(|p| {
                    let mut q = p.params;
                    match p.kind {
                        PrimitiveKind::Circle => { q[0] = q[0] * k + dx; q[1] = q[1] * k + dy; q[2] *= k; }
                        kind => for i in 0..kind.used_slots() {
                            q[i] = q[i] * k + if i % 2 == 0 { dx } else { dy };
                        }
                    }
                    Primitive::raw(p.kind, q).unwrap()
                }).collect(),
            };
            assert_prims_close(&normalize_sketch(&moved).unwrap(), &normalize_sketch(&s).unwrap(), 1e-9);
        }
    }
}
