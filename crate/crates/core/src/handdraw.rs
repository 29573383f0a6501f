//! Hand-drawn stroke simulation, rasterization and image augmentation.
//!
//! Lines are perturbed perpendicular to their direction by a zero-mean
//! Matérn-3/2 Gaussian process over arc length; arcs and circles get a GP
//! radius modulation in polar form about their center. Length scale and
//! amplitude are proportional to the primitive's length and the draw is
//! truncated, so the wobble looks alike at every size.

use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::Sketch;
use crate::geometry::{arc_sweep, circumcircle, polyline_points, Primitive, PrimitiveKind};
use crate::seeds;

pub const IMAGE_SIZE: usize = 128;
const PIXEL_SCALE: f64 = (IMAGE_SIZE - 1) as f64;
pub const LINE_STATIONS: usize = 64;
pub const ARC_STATIONS: usize = 96;
pub const STROKE_WIDTH_PX: f64 = 1.5;
pub const POINT_RADIUS_PX: f64 = 2.0;

#[derive(Debug, Error)]
pub enum HanddrawError {
    #[error("kernel domain error: {0}")]
    Domain(&'static str),
    #[error("Cholesky factorization failed after jitter retries")]
    CholeskyFailure,
    #[error("GP inputs must be a strictly increasing grid of at least 2 points")]
    BadGrid,
    #[error("bad image: {0}")]
    BadImage(String),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

/// Matérn-3/2 covariance `v (1 + sqrt3 r / l) exp(-sqrt3 r / l)`.
pub fn matern32(r: f64, lengthscale: f64, variance: f64) -> Result<f64, HanddrawError> {
    if !(lengthscale > 0.0) {
        return Err(HanddrawError::Domain("lengthscale must be positive"));
    }
    if !(variance > 0.0) {
        return Err(HanddrawError::Domain("variance must be positive"));
    }
    if !(r >= 0.0) {
        return Err(HanddrawError::Domain("distance must be nonnegative"));
    }
    let z = 3f64.sqrt() * r / lengthscale;
    Ok(variance * (1.0 + z) * (-z).exp())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GpKernel {
    pub lengthscale: f64,
    pub variance: f64,
    /// Diagonal jitter, relative to `variance`.
    pub jitter: f64,
    /// Clip draws to `±truncation·σ`; `None` disables clipping.
    pub truncation: Option<f64>,
}

/// One draw from the zero-mean GP at `inputs` via Cholesky of `K + jitter·v·I`.
/// The factorization is retried with 10x jitter up to three times.
pub fn gp_sample<R: Rng + ?Sized>(inputs: &[f64], kernel: &GpKernel, rng: &mut R) -> Result<Vec<f64>, HanddrawError> {
    if inputs.len() < 2 || inputs.windows(2).any(|w| !(w[1] > w[0])) {
        return Err(HanddrawError::BadGrid);
    }
    let n = inputs.len();
    let mut cov = DMatrix::<f64>::zeros(n, n);
    for i in 0..n {
        for j in 0..=i {
            let k = matern32((inputs[i] - inputs[j]).abs(), kernel.lengthscale, kernel.variance)?;
            cov[(i, j)] = k;
            cov[(j, i)] = k;
        }
    }
    let mut jitter = kernel.jitter * kernel.variance;
    let mut chol = None;
    for _ in 0..=3 {
        let mut m = cov.clone();
        for i in 0..n {
            m[(i, i)] += jitter;
        }
        if let Some(c) = m.cholesky() {
            chol = Some(c);
            break;
        }
        jitter *= 10.0;
    }
    let chol = chol.ok_or(HanddrawError::CholeskyFailure)?;
    let z = DVector::<f64>::from_iterator(n, (0..n).map(|_| StandardNormal.sample(rng)));
    let f = chol.l() * z;
    let sigma = kernel.variance.sqrt();
    Ok(f.iter()
        .map(|&v| match kernel.truncation {
            Some(t) => v.clamp(-t * sigma, t * sigma),
            None => v,
        })
        .collect())
}

pub fn gp_sample_seeded(inputs: &[f64], kernel: &GpKernel, seed: u64) -> Result<Vec<f64>, HanddrawError> {
    gp_sample(inputs, kernel, &mut seeds::rng(seed, 0))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoiseConfig {
    /// GP length scale as a fraction of the primitive's length.
    pub lengthscale_ratio: f64,
    /// Per-primitive amplitude σ is drawn uniformly from this range, times the length.
    pub amplitude_min: f64,
    pub amplitude_max: f64,
    pub jitter: f64,
    /// Displacement clip in units of σ.
    pub truncation: f64,
    pub samples_per_sketch: usize,
}

impl Default for NoiseConfig {
    fn default() -> Self {
        Self {
            lengthscale_ratio: 0.3,
            amplitude_min: 0.01,
            amplitude_max: 0.03,
            jitter: 1e-6,
            truncation: 2.0,
            samples_per_sketch: 5,
        }
    }
}

impl NoiseConfig {
    /// Zero-amplitude configuration: strokes follow the exact geometry.
    pub fn precise() -> Self {
        Self { amplitude_min: 0.0, amplitude_max: 0.0, ..Self::default() }
    }

    pub fn validate(&self) -> Result<(), HanddrawError> {
        if !(self.lengthscale_ratio > 0.0 && self.jitter > 0.0) {
            return Err(HanddrawError::Domain("lengthscale_ratio and jitter must be positive"));
        }
        if !(self.amplitude_min >= 0.0 && self.amplitude_max >= self.amplitude_min) {
            return Err(HanddrawError::Domain("amplitude range must be nonnegative and ordered"));
        }
        if !(self.truncation >= 1.0) {
            return Err(HanddrawError::Domain("truncation must be at least 1 sigma"));
        }
        Ok(())
    }
}

/// Polyline in normalized sketch coordinates with a nominal pixel width.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Stroke {
    pub points: Vec<[f64; 2]>,
    pub width_px: f64,
}

impl Stroke {
    pub fn new(points: Vec<[f64; 2]>) -> Self {
        Self { points, width_px: STROKE_WIDTH_PX }
    }

    /// Filled dot of the point-primitive radius.
    pub fn dot(p: [f64; 2]) -> Self {
        Self { points: vec![p, p], width_px: 2.0 * POINT_RADIUS_PX }
    }
}

fn stations(n: usize) -> Vec<f64> {
    (0..n).map(|i| i as f64 / (n - 1) as f64).collect()
}

/// GP displacements along `len` units of path, or zeros when the amplitude is zero.
fn displacements<R: Rng>(ts: &[f64], len: f64, amp: f64, cfg: &NoiseConfig, rng: &mut R) -> Result<Vec<f64>, HanddrawError> {
    let sigma = amp * len;
    if sigma <= 0.0 || len <= 1e-12 {
        return Ok(vec![0.0; ts.len()]);
    }
    let inputs: Vec<f64> = ts.iter().map(|t| t * len).collect();
    let kernel = GpKernel {
        lengthscale: cfg.lengthscale_ratio * len,
        variance: sigma * sigma,
        jitter: cfg.jitter,
        truncation: Some(cfg.truncation),
    };
    gp_sample(&inputs, &kernel, rng)
}

fn render_primitive<R: Rng>(prim: &Primitive, cfg: &NoiseConfig, rng: &mut R) -> Result<Stroke, HanddrawError> {
    let amp = if cfg.amplitude_max > 0.0 { rng.random_range(cfg.amplitude_min..=cfg.amplitude_max) } else { 0.0 };
    let p = prim.params;
    match prim.kind {
        PrimitiveKind::Point => Ok(Stroke::dot([p[0], p[1]])),
        PrimitiveKind::Line => {
            let (dx, dy) = (p[2] - p[0], p[3] - p[1]);
            let len = (dx * dx + dy * dy).sqrt();
            let ts = stations(LINE_STATIONS);
            let d = displacements(&ts, len, amp, cfg, rng)?;
            let normal = if len > 1e-12 { [-dy / len, dx / len] } else { [0.0, 0.0] };
            let pts = ts
                .iter()
                .zip(&d)
                .map(|(&t, &off)| [p[0] + t * dx + off * normal[0], p[1] + t * dy + off * normal[1]])
                .collect();
            Ok(Stroke::new(pts))
        }
        PrimitiveKind::Circle => {
            let r = p[2];
            let ts = stations(ARC_STATIONS + 1);
            let mut d = displacements(&ts, std::f64::consts::TAU * r, amp, cfg, rng)?;
            // Remove the end-to-end drift so the closed path meets itself.
            let drift = d[ARC_STATIONS] - d[0];
            for (k, v) in d.iter_mut().enumerate() {
                *v -= drift * ts[k];
            }
            let mut pts: Vec<[f64; 2]> = ts[..ARC_STATIONS]
                .iter()
                .zip(&d)
                .map(|(&t, &off)| {
                    let th = std::f64::consts::TAU * t;
                    [p[0] + (r + off) * th.cos(), p[1] + (r + off) * th.sin()]
                })
                .collect();
            pts.push(pts[0]);
            Ok(Stroke::new(pts))
        }
        PrimitiveKind::Arc => {
            let (s, m, e) = ([p[0], p[1]], [p[2], p[3]], [p[4], p[5]]);
            match circumcircle(s, m, e) {
                Ok((c, r)) => {
                    let (t0, sweep) = arc_sweep(c, s, m, e);
                    let ts = stations(ARC_STATIONS);
                    let d = displacements(&ts, r * sweep.abs(), amp, cfg, rng)?;
                    let pts = ts
                        .iter()
                        .zip(&d)
                        .map(|(&t, &off)| {
                            let th = t0 + sweep * t;
                            [c[0] + (r + off) * th.cos(), c[1] + (r + off) * th.sin()]
                        })
                        .collect();
                    Ok(Stroke::new(pts))
                }
                Err(_) => Ok(Stroke::new(polyline_points(&p, ARC_STATIONS))),
            }
        }
    }
}

/// Simulated hand drawing of a normalized sketch; primitive `i` uses RNG stream `i`.
pub fn render_hand(sketch: &Sketch, cfg: &NoiseConfig, seed: u64) -> Result<Vec<Stroke>, HanddrawError> {
    cfg.validate()?;
    sketch
        .primitives
        .iter()
        .enumerate()
        .map(|(i, prim)| render_primitive(prim, cfg, &mut seeds::rng(seed, i as u64)))
        .collect()
}

/// 128 x 128 8-bit grayscale image, row-major, 255 = white paper.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RasterImage {
    pixels: Vec<u8>,
}

impl Default for RasterImage {
    fn default() -> Self {
        Self::blank()
    }
}

impl RasterImage {
    pub fn blank() -> Self {
        Self { pixels: vec![255; IMAGE_SIZE * IMAGE_SIZE] }
    }

    pub fn from_pixels(pixels: Vec<u8>) -> Result<Self, HanddrawError> {
        if pixels.len() != IMAGE_SIZE * IMAGE_SIZE {
            return Err(HanddrawError::BadImage(format!("expected {} pixels, got {}", IMAGE_SIZE * IMAGE_SIZE, pixels.len())));
        }
        Ok(Self { pixels })
    }

    pub fn pixels(&self) -> &[u8] {
        &self.pixels
    }

    pub fn get(&self, col: usize, row: usize) -> u8 {
        self.pixels[row * IMAGE_SIZE + col]
    }

    /// Ink coverage per pixel in `[0, 1]`: 0 for white paper, 1 for solid stroke.
    pub fn ink(&self) -> Vec<f64> {
        self.pixels.iter().map(|&v| 1.0 - v as f64 / 255.0).collect()
    }

    pub fn to_png(&self) -> Vec<u8> {
        let mut out = Vec::new();
        {
            let mut enc = png::Encoder::new(&mut out, IMAGE_SIZE as u32, IMAGE_SIZE as u32);
            enc.set_color(png::ColorType::Grayscale);
            enc.set_depth(png::BitDepth::Eight);
            let mut w = enc.write_header().expect("in-memory PNG header");
            w.write_image_data(&self.pixels).expect("in-memory PNG data");
        }
        out
    }

    /// Decodes an 8-bit PNG of size 128 x 128; color inputs are converted to luma.
    pub fn from_png(bytes: &[u8]) -> Result<Self, HanddrawError> {
        let bad = |e: &dyn std::fmt::Display| HanddrawError::BadImage(e.to_string());
        let mut dec = png::Decoder::new(std::io::Cursor::new(bytes));
        dec.set_transformations(png::Transformations::EXPAND | png::Transformations::STRIP_16);
        let mut reader = dec.read_info().map_err(|e| bad(&e))?;
        let mut buf = vec![0; reader.output_buffer_size().ok_or_else(|| bad(&"image too large"))?];
        let info = reader.next_frame(&mut buf).map_err(|e| bad(&e))?;
        if info.width as usize != IMAGE_SIZE || info.height as usize != IMAGE_SIZE {
            return Err(HanddrawError::BadImage(format!("expected 128x128, got {}x{}", info.width, info.height)));
        }
        let data = &buf[..info.buffer_size()];
        let channels = info.color_type.samples();
        let pixels = data
            .chunks_exact(channels)
            .map(|px| match channels {
                1 | 2 => px[0],
                _ => (0.299 * px[0] as f64 + 0.587 * px[1] as f64 + 0.114 * px[2] as f64).round() as u8,
            })
            .collect();
        Self::from_pixels(pixels)
    }
}

/// Normalized sketch coordinates to pixel coordinates (column, row).
pub fn to_pixel(p: [f64; 2]) -> [f64; 2] {
    [p[0] * PIXEL_SCALE, (1.0 - p[1]) * PIXEL_SCALE]
}

fn segment_distance(p: [f64; 2], a: [f64; 2], b: [f64; 2]) -> f64 {
    let (vx, vy) = (b[0] - a[0], b[1] - a[1]);
    let len2 = vx * vx + vy * vy;
    let t = if len2 > 0.0 { (((p[0] - a[0]) * vx + (p[1] - a[1]) * vy) / len2).clamp(0.0, 1.0) } else { 0.0 };
    let (dx, dy) = (p[0] - a[0] - t * vx, p[1] - a[1] - t * vy);
    (dx * dx + dy * dy).sqrt()
}

/// Anti-aliased stroke rendering: a pixel's ink is `clamp(w/2 + 0.5 - d, 0, 1)`
/// for distance `d` from its center to the nearest segment.
pub fn rasterize(strokes: &[Stroke]) -> RasterImage {
    let mut ink = vec![0f64; IMAGE_SIZE * IMAGE_SIZE];
    let max_px = (IMAGE_SIZE - 1) as f64;
    for stroke in strokes {
        let reach = stroke.width_px / 2.0 + 0.5;
        for seg in stroke.points.windows(2) {
            let (a, b) = (to_pixel(seg[0]), to_pixel(seg[1]));
            if !(a.iter().chain(&b).all(|v| v.is_finite())) {
                continue;
            }
            let c0 = (a[0].min(b[0]) - reach).floor().max(0.0);
            let c1 = (a[0].max(b[0]) + reach).ceil().min(max_px);
            let r0 = (a[1].min(b[1]) - reach).floor().max(0.0);
            let r1 = (a[1].max(b[1]) + reach).ceil().min(max_px);
            if c0 > c1 || r0 > r1 {
                continue;
            }
            for row in r0 as usize..=r1 as usize {
                for col in c0 as usize..=c1 as usize {
                    let cov = (reach - segment_distance([col as f64, row as f64], a, b)).clamp(0.0, 1.0);
                    let slot = &mut ink[row * IMAGE_SIZE + col];
                    if cov > *slot {
                        *slot = cov;
                    }
                }
            }
        }
    }
    RasterImage { pixels: ink.iter().map(|&c| (255.0 * (1.0 - c)).round() as u8).collect() }
}

/// Exact geometry, no noise.
pub fn render_precise(sketch: &Sketch) -> RasterImage {
    let strokes = render_hand(sketch, &NoiseConfig::precise(), 0).expect("noise-free rendering cannot fail");
    rasterize(&strokes)
}

/// The `samples_per_sketch` hand-drawn renders of one sketch; sample `k` uses seed stream `k`.
pub fn render_samples(sketch: &Sketch, cfg: &NoiseConfig, seed: u64) -> Result<Vec<RasterImage>, HanddrawError> {
    (0..cfg.samples_per_sketch)
        .map(|k| Ok(rasterize(&render_hand(sketch, cfg, seeds::mix_seed(seed, k as u64))?)))
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AffineConfig {
    pub max_translate_px: f64,
    pub max_rotate_deg: f64,
    pub max_shear_deg: f64,
    pub max_scale: f64,
}

impl Default for AffineConfig {
    fn default() -> Self {
        Self { max_translate_px: 8.0, max_rotate_deg: 10.0, max_shear_deg: 10.0, max_scale: 0.20 }
    }
}

/// One concrete transform, applied about the image center.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AffineParams {
    pub translate_px: [f64; 2],
    pub rotate_deg: f64,
    pub shear_deg: f64,
    pub scale: f64,
}

impl AffineParams {
    pub fn identity() -> Self {
        Self { translate_px: [0.0, 0.0], rotate_deg: 0.0, shear_deg: 0.0, scale: 1.0 }
    }

    pub fn sample<R: Rng>(cfg: &AffineConfig, rng: &mut R) -> Self {
        let mut sym = |limit: f64| if limit > 0.0 { rng.random_range(-limit..=limit) } else { 0.0 };
        Self {
            translate_px: [sym(cfg.max_translate_px), sym(cfg.max_translate_px)],
            rotate_deg: sym(cfg.max_rotate_deg),
            shear_deg: sym(cfg.max_shear_deg),
            scale: 1.0 + sym(cfg.max_scale),
        }
    }

    /// Linear part `scale * R(rotate) * Shear(shear)`.
    fn linear(&self) -> [[f64; 2]; 2] {
        let (s, c) = self.rotate_deg.to_radians().sin_cos();
        let k = self.shear_deg.to_radians().tan();
        let z = self.scale;
        [[z * c, z * (c * k - s)], [z * s, z * (s * k + c)]]
    }
}

/// Applies `params` with bilinear resampling; samples outside the source are white.
pub fn apply_affine(image: &RasterImage, params: &AffineParams) -> RasterImage {
    let m = params.linear();
    let det = m[0][0] * m[1][1] - m[0][1] * m[1][0];
    let inv = [[m[1][1] / det, -m[0][1] / det], [-m[1][0] / det, m[0][0] / det]];
    let center = PIXEL_SCALE / 2.0;
    let src = |c: i64, r: i64| -> f64 {
        if c < 0 || r < 0 || c >= IMAGE_SIZE as i64 || r >= IMAGE_SIZE as i64 {
            255.0
        } else {
            image.pixels[r as usize * IMAGE_SIZE + c as usize] as f64
        }
    };
    let mut out = vec![255u8; IMAGE_SIZE * IMAGE_SIZE];
    for row in 0..IMAGE_SIZE {
        for col in 0..IMAGE_SIZE {
            let qx = col as f64 - center - params.translate_px[0];
            let qy = row as f64 - center - params.translate_px[1];
            let x = inv[0][0] * qx + inv[0][1] * qy + center;
            let y = inv[1][0] * qx + inv[1][1] * qy + center;
            let (x0, y0) = (x.floor(), y.floor());
            let (fx, fy) = (x - x0, y - y0);
            let (c0, r0) = (x0 as i64, y0 as i64);
            let v = src(c0, r0) * (1.0 - fx) * (1.0 - fy)
                + src(c0 + 1, r0) * fx * (1.0 - fy)
                + src(c0, r0 + 1) * (1.0 - fx) * fy
                + src(c0 + 1, r0 + 1) * fx * fy;
            out[row * IMAGE_SIZE + col] = v.round().clamp(0.0, 255.0) as u8;
        }
    }
    RasterImage { pixels: out }
}

/// Random affine transform drawn jointly within every limit of `cfg`.
pub fn affine_augment(image: &RasterImage, cfg: &AffineConfig, seed: u64) -> RasterImage {
    apply_affine(image, &AffineParams::sample(cfg, &mut seeds::rng(seed, 0)))
}

/// Writes `<out>/<id>/s{k}.png` for every render plus `<out>/<id>.json` ground truth.
pub fn write_render_dir(out: &Path, sketch: &Sketch, renders: &[RasterImage]) -> Result<(), HanddrawError> {
    let dir = out.join(&sketch.id);
    std::fs::create_dir_all(&dir)?;
    for (k, img) in renders.iter().enumerate() {
        std::fs::write(dir.join(format!("s{k}.png")), img.to_png())?;
    }
    let mut json = serde_json::to_string_pretty(sketch).expect("sketch serializes");
    json.push('\n');
    std::fs::write(out.join(format!("{}.json", sketch.id)), json)?;
    Ok(())
}

/// Reads back the renders written by [`write_render_dir`], in sample order.
pub fn read_render_dir(out: &Path, id: &str) -> Result<Vec<RasterImage>, HanddrawError> {
    let dir = out.join(id);
    let mut images = Vec::new();
    for k in 0.. {
        let path = dir.join(format!("s{k}.png"));
        if !path.exists() {
            break;
        }
        images.push(RasterImage::from_png(&std::fs::read(path)?)?);
    }
    if images.is_empty() {
        return Err(HanddrawError::BadImage(format!("no renders under {}", dir.display())));
    }
    Ok(images)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::generate_sketch;

    fn one(prim: Primitive) -> Sketch {
        Sketch { id: "one".into(), primitives: vec![prim] }
    }

    #[test]
    fn matern_closed_form_values() {
        assert_eq!(matern32(0.0, 0.7, 1.0).unwrap(), 1.0);
        let want = (1.0 + 3f64.sqrt()) * (-(3f64.sqrt())).exp();
        assert!((matern32(0.4, 0.4, 1.0).unwrap() - want).abs() < 1e-15);
        assert!((want - 0.48335).abs() < 1e-5);
        let mut prev = f64::INFINITY;
        for i in 0..50 {
            let k = matern32(i as f64 * 0.05, 0.3, 2.0).unwrap();
            assert!(k < prev);
            prev = k;
        }
        assert!(matern32(0.1, 0.0, 1.0).is_err());
        assert!(matern32(0.1, 1.0, -1.0).is_err());
    }

    fn kernel(variance: f64, truncation: Option<f64>) -> GpKernel {
        GpKernel { lengthscale: 0.3, variance, jitter: 1e-6, truncation }
    }

    #[test]
    fn gp_is_deterministic_and_vanishes_with_variance() {
        let grid: Vec<f64> = (0..20).map(|i| i as f64 * 0.05).collect();
        let a = gp_sample_seeded(&grid, &kernel(1.0, Some(2.0)), 9).unwrap();
        assert_eq!(a, gp_sample_seeded(&grid, &kernel(1.0, Some(2.0)), 9).unwrap());
        assert!(a.iter().all(|v| v.abs() <= 2.0));
        let tiny = gp_sample_seeded(&grid, &kernel(1e-300, None), 9).unwrap();
        assert!(tiny.iter().all(|v| v.abs() < 1e-140));
        assert!(matches!(gp_sample_seeded(&[0.0], &kernel(1.0, None), 1), Err(HanddrawError::BadGrid)));
        assert!(matches!(gp_sample_seeded(&[0.0, 0.0], &kernel(1.0, None), 1), Err(HanddrawError::BadGrid)));
    }

    #[test]
    fn gp_marginal_variance_matches_kernel() {
        let grid = [0.0, 0.25, 0.5];
        let k = kernel(2.5, None);
        let mut rng = seeds::rng(42, 0);
        let draws: Vec<f64> = (0..10_000).map(|_| gp_sample(&grid, &k, &mut rng).unwrap()[1]).collect();
        let mean = draws.iter().sum::<f64>() / draws.len() as f64;
        let var = draws.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / (draws.len() - 1) as f64;
        assert!((var - 2.5).abs() < 0.25, "sample variance {var}");
    }

    #[test]
    fn zero_amplitude_strokes_follow_geometry() {
        let s = generate_sketch(3);
        let strokes = render_hand(&s, &NoiseConfig::precise(), 11).unwrap();
        for (prim, stroke) in s.primitives.iter().zip(&strokes) {
            let exact = match prim.kind {
                PrimitiveKind::Point => continue,
                _ => prim.sample(400),
            };
            for p in &stroke.points {
                let d = exact.iter().map(|q| ((p[0] - q[0]).powi(2) + (p[1] - q[1]).powi(2)).sqrt()).fold(f64::INFINITY, f64::min);
                assert!(d < 0.01, "{:?} deviates by {d}", prim.kind);
            }
        }
    }

    #[test]
    fn line_endpoints_stay_within_truncation() {
        let line = Primitive::line(0.1, 0.2, 0.9, 0.6);
        let len = (0.8f64.powi(2) + 0.4f64.powi(2)).sqrt();
        let cfg = NoiseConfig::default();
        let bound = cfg.truncation * cfg.amplitude_max * len + 1e-12;
        for seed in 0..20 {
            let st = &render_hand(&one(line), &cfg, seed).unwrap()[0];
            let (a, b) = (st.points[0], *st.points.last().unwrap());
            assert!(((a[0] - 0.1).powi(2) + (a[1] - 0.2).powi(2)).sqrt() <= bound);
            assert!(((b[0] - 0.9).powi(2) + (b[1] - 0.6).powi(2)).sqrt() <= bound);
            assert_eq!(st.points.len(), LINE_STATIONS);
        }
    }

    #[test]
    fn circle_strokes_are_closed() {
        let st = &render_hand(&one(Primitive::circle(0.5, 0.5, 0.3)), &NoiseConfig::default(), 5).unwrap()[0];
        assert_eq!(st.points.first(), st.points.last());
    }

    #[test]
    fn rasterize_blank_and_horizontal_line() {
        assert!(rasterize(&[]).pixels().iter().all(|&p| p == 255));
        let img = rasterize(&[Stroke::new(vec![[0.1, 0.5], [0.9, 0.5]])]);
        for row in 0..IMAGE_SIZE {
            let dark = (0..IMAGE_SIZE).any(|c| img.get(c, row) < 255);
            assert_eq!(dark, (62..=65).contains(&row) && dark, "row {row}");
            if !(62..=65).contains(&row) {
                assert!(!dark, "unexpected ink in row {row}");
            }
        }
        assert!((0..IMAGE_SIZE).any(|c| img.get(c, 63) < 128));
    }

    #[test]
    fn rasterizer_clips_out_of_range_geometry() {
        let img = rasterize(&[Stroke::new(vec![[-3.0, -2.0], [4.0, 5.0]]), Stroke::new(vec![[f64::NAN, 0.0], [0.5, 0.5]])]);
        assert_eq!(img.pixels().len(), IMAGE_SIZE * IMAGE_SIZE);
    }

    #[test]
    fn precise_render_matches_zero_amplitude_hand_render() {
        let s = generate_sketch(8);
        let hand = rasterize(&render_hand(&s, &NoiseConfig::precise(), 77).unwrap());
        assert_eq!(render_precise(&s), hand);
        assert_eq!(render_precise(&s), render_precise(&s));
    }

    #[test]
    fn point_is_a_two_pixel_dot() {
        let img = render_precise(&one(Primitive::point(0.5, 0.5)));
        // (0.5, 0.5) maps to pixel (63.5, 63.5); ink reaches 2.5 px from there.
        for row in 0..IMAGE_SIZE {
            for col in 0..IMAGE_SIZE {
                let d = ((col as f64 - 63.5).powi(2) + (row as f64 - 63.5).powi(2)).sqrt();
                let v = img.get(col, row);
                if d >= 2.5 {
                    assert_eq!(v, 255);
                }
                if d <= 1.5 {
                    assert_eq!(v, 0);
                }
            }
        }
    }

    #[test]
    fn affine_identity_and_pure_translation() {
        let img = render_precise(&generate_sketch(4));
        let same = apply_affine(&img, &AffineParams::identity());
        assert!(img.pixels().iter().zip(same.pixels()).all(|(a, b)| a.abs_diff(*b) <= 1));
        let zero = AffineConfig { max_translate_px: 0.0, max_rotate_deg: 0.0, max_shear_deg: 0.0, max_scale: 0.0 };
        assert_eq!(affine_augment(&img, &zero, 3), same);

        let shifted = apply_affine(&img, &AffineParams { translate_px: [8.0, 0.0], ..AffineParams::identity() });
        for row in 0..IMAGE_SIZE {
            for col in 0..IMAGE_SIZE {
                let want = if col >= 8 { img.get(col - 8, row) } else { 255 };
                assert_eq!(shifted.get(col, row), want);
            }
        }
        let cfg = AffineConfig::default();
        assert_eq!(affine_augment(&img, &cfg, 5), affine_augment(&img, &cfg, 5));
    }

    #[test]
    fn png_round_trip_and_size_check() {
        let img = render_precise(&generate_sketch(2));
        assert_eq!(RasterImage::from_png(&img.to_png()).unwrap(), img);
        assert!(RasterImage::from_pixels(vec![0; 10]).is_err());
    }

    #[test]
    fn render_dir_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let s = generate_sketch(6);
        let renders = render_samples(&s, &NoiseConfig::default(), 1).unwrap();
        assert_eq!(renders.len(), 5);
        write_render_dir(dir.path(), &s, &renders).unwrap();
        assert_eq!(read_render_dir(dir.path(), &s.id).unwrap(), renders);
        assert!(dir.path().join(format!("{}.json", s.id)).exists());
    }
}
