//! Denoising groups: noised copies of the ground truth fed to the decoder
//! alongside the matching queries, plus the attention mask that keeps them
//! from leaking answers.
//!
//! Query layout per image is `[group 0 | group 1 | ... | group P-1 | matching]`,
//! each group `G` slots wide where `G` is the batch-max ground-truth count.

use std::sync::Arc;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::dataset::Sketch;
use crate::geometry::{param_mask, ParamVector, PrimitiveKind, NUM_KINDS};
use crate::model::DenoiseQueries;
use crate::seeds;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DenoiseConfig {
    /// Label flip probability.
    pub gamma: f64,
    /// Scale of the standard-normal parameter noise.
    pub lambda: f64,
    /// Number of groups; 0 disables denoising.
    pub groups: usize,
    pub label_noise: bool,
    pub param_noise: bool,
    /// When false only padding is masked, so groups and matching queries see each other.
    pub use_mask: bool,
}

impl Default for DenoiseConfig {
    fn default() -> Self {
        Self { gamma: 0.4, lambda: 0.3, groups: 3, label_noise: true, param_noise: true, use_mask: true }
    }
}

impl DenoiseConfig {
    pub fn disabled() -> Self {
        Self { groups: 0, ..Self::default() }
    }

    pub fn validate(&self) -> Result<(), String> {
        if !(0.0..=1.0).contains(&self.gamma) {
            return Err(format!("gamma {} must lie in [0, 1]", self.gamma));
        }
        if !(self.lambda >= 0.0) {
            return Err(format!("lambda {} must be nonnegative", self.lambda));
        }
        Ok(())
    }
}

/// Each label independently becomes, with probability `gamma`, one of the
/// other three kinds chosen uniformly.
pub fn flip_labels<R: Rng + ?Sized>(kinds: &[PrimitiveKind], gamma: f64, rng: &mut R) -> Vec<PrimitiveKind> {
    kinds
        .iter()
        .map(|&k| {
            if gamma > 0.0 && rng.random_bool(gamma) {
                let shift = rng.random_range(1..NUM_KINDS);
                PrimitiveKind::from_index((k.index() + shift) % NUM_KINDS).expect("kind index")
            } else {
                k
            }
        })
        .collect()
}

pub fn flip_labels_seeded(kinds: &[PrimitiveKind], gamma: f64, seed: u64) -> Vec<PrimitiveKind> {
    flip_labels(kinds, gamma, &mut seeds::rng(seed, 0))
}

/// `clamp((params + lambda * noise) * mask_kind, 0, 1)` for an explicit noise draw.
pub fn apply_param_noise(params: &ParamVector, kind: PrimitiveKind, lambda: f64, noise: &[f64; 6]) -> ParamVector {
    let mask = param_mask(kind);
    std::array::from_fn(|i| ((params[i] + lambda * noise[i]) * mask[i]).clamp(0.0, 1.0))
}

pub fn noise_params<R: Rng + ?Sized>(params: &ParamVector, kind: PrimitiveKind, lambda: f64, rng: &mut R) -> ParamVector {
    let noise: [f64; 6] = std::array::from_fn(|_| StandardNormal.sample(rng));
    apply_param_noise(params, kind, lambda, &noise)
}

pub fn noise_params_seeded(params: &ParamVector, kind: PrimitiveKind, lambda: f64, seed: u64) -> ParamVector {
    noise_params(params, kind, lambda, &mut seeds::rng(seed, 0))
}

/// One denoise query slot. Active slots carry the index of their source object.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DenoiseSlot {
    pub kind: Option<PrimitiveKind>,
    pub params: ParamVector,
    pub gt: Option<usize>,
}

impl DenoiseSlot {
    pub const PADDING: Self = Self { kind: None, params: [0.0; 6], gt: None };

    pub fn is_padding(&self) -> bool {
        self.gt.is_none()
    }
}

/// Denoise slots of one image, `groups * group_size` long, group-major.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageGroups {
    pub slots: Vec<DenoiseSlot>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DenoiseBatch {
    pub groups: usize,
    pub group_size: usize,
    pub n_queries: usize,
    pub use_mask: bool,
    pub images: Vec<ImageGroups>,
}

impl DenoiseBatch {
    pub fn active_count(&self, image: usize) -> usize {
        self.images[image].slots.iter().filter(|s| !s.is_padding()).count()
    }

    /// Decoder inputs and attention mask for one image.
    pub fn queries(&self, image: usize) -> DenoiseQueries {
        let slots = &self.images[image].slots;
        let active: Vec<bool> = slots.iter().map(|s| !s.is_padding()).collect();
        let mut mask = if self.use_mask {
            build_attention_mask(self.groups, self.group_size, self.n_queries)
        } else {
            vec![false; (slots.len() + self.n_queries).pow(2)]
        };
        mask_padding(&mut mask, slots.len() + self.n_queries, &active);
        DenoiseQueries {
            kinds: slots.iter().map(|s| s.kind).collect(),
            params: slots.iter().map(|s| s.params).collect(),
            mask: Arc::from(mask),
        }
    }
}

/// Independent noised copies of every image's objects. Image `i`, group `p`
/// draws from stream `(mix_seed(seed, i), p)`.
pub fn build_groups(batch: &[Sketch], cfg: &DenoiseConfig, n_queries: usize, seed: u64) -> DenoiseBatch {
    let group_size = if cfg.groups == 0 { 0 } else { batch.iter().map(Sketch::len).max().unwrap_or(0) };
    let images = batch
        .iter()
        .enumerate()
        .map(|(i, sketch)| {
            let mut slots = Vec::with_capacity(cfg.groups * group_size);
            for p in 0..cfg.groups {
                let mut rng = seeds::rng(seeds::mix_seed(seed, i as u64), p as u64);
                let kinds = sketch.kinds();
                let flipped = if cfg.label_noise { flip_labels(&kinds, cfg.gamma, &mut rng) } else { kinds };
                for (j, (prim, kind)) in sketch.primitives.iter().zip(flipped).enumerate() {
                    let params =
                        if cfg.param_noise { noise_params(&prim.params, prim.kind, cfg.lambda, &mut rng) } else { prim.params };
                    slots.push(DenoiseSlot { kind: Some(kind), params, gt: Some(j) });
                }
                slots.extend(std::iter::repeat_n(DenoiseSlot::PADDING, group_size - sketch.len()));
            }
            ImageGroups { slots }
        })
        .collect();
    DenoiseBatch { groups: cfg.groups, group_size, n_queries, use_mask: cfg.use_mask, images }
}

/// Row-major mask of side `P*G + N`, `true` = row cannot see column. Groups see
/// only themselves and the matching queries; matching queries see only each other.
pub fn build_attention_mask(groups: usize, group_size: usize, n_queries: usize) -> Vec<bool> {
    let dn = groups * group_size;
    let side = dn + n_queries;
    let mut mask = vec![false; side * side];
    for i in 0..side {
        for j in 0..dn {
            let blocked = if i >= dn { true } else { i / group_size != j / group_size };
            mask[i * side + j] = blocked;
        }
    }
    mask
}

/// Blocks every row and column of inactive denoise slots.
pub fn mask_padding(mask: &mut [bool], side: usize, active: &[bool]) {
    for (s, _) in active.iter().enumerate().filter(|(_, a)| !**a) {
        for k in 0..side {
            mask[s * side + k] = true;
            mask[k * side + s] = true;
        }
    }
}
