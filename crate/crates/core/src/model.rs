//! Image-to-primitive transformer.
//!
//! A ViT-style encoder turns the 64 patches of a 128 x 128 image into memory
//! tokens. The decoder runs two kinds of queries through the same layers:
//! denoise queries (rows `0..M`, built from noised ground truth) and the `N`
//! learned matching queries (rows `M..M+N`). Self-attention between them is
//! governed by a boolean mask where `true` means "cannot see". Two heads map
//! each output row to four kind logits and six squashed parameters.

use std::io::Read;
use std::path::Path;
use std::sync::Arc;

use rand::Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{ParamVector, PrimitiveKind, NUM_KINDS};
use crate::handdraw::{RasterImage, IMAGE_SIZE};
use crate::numcore::{Array, Graph, NumError, ParamId, ParameterStore, Var};
use crate::scalar::Scalar;
use crate::seeds;

const CHECKPOINT_MAGIC: &[u8; 4] = b"PPIN";
pub const CHECKPOINT_VERSION: u32 = 1;
const PE_TEMPERATURE: f64 = 20.0;
const INIT_STD: f64 = 0.02;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    InvalidConfig(String),
    #[error("image must hold {expected} pixels, got {found}")]
    BadImageShape { expected: usize, found: usize },
    #[error("attention mask must have side {expected}, got {found} entries")]
    MaskShapeMismatch { expected: usize, found: usize },
    #[error("mode mismatch: {0}")]
    ModeMismatch(&'static str),
    #[error("denoise query {query} slot {slot} = {value} is outside [0, 1]")]
    ParamOutOfRange { query: usize, slot: usize, value: f64 },
    #[error(transparent)]
    Num(#[from] NumError),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("checkpoint version {found} is not supported (expected {expected})")]
    VersionMismatch { found: u32, expected: u32 },
    #[error("checkpoint config does not match the requested config")]
    ConfigMismatch,
    #[error("malformed checkpoint: {0}")]
    Format(String),
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub image: usize,
    pub patch: usize,
    pub embed_dim: usize,
    pub enc_layers: usize,
    pub dec_layers: usize,
    pub heads: usize,
    pub ffn_dim: usize,
    pub n_queries: usize,
    pub n_kinds: usize,
}

impl ModelConfig {
    pub fn tiny() -> Self {
        Self::with_width(64, 2, 4)
    }

    pub fn full() -> Self {
        Self::with_width(256, 6, 8)
    }

    fn with_width(d: usize, layers: usize, heads: usize) -> Self {
        Self {
            image: IMAGE_SIZE,
            patch: 16,
            embed_dim: d,
            enc_layers: layers,
            dec_layers: layers,
            heads,
            ffn_dim: 4 * d,
            n_queries: 20,
            n_kinds: NUM_KINDS,
        }
    }

    pub fn tokens(&self) -> usize {
        (self.image / self.patch).pow(2)
    }

    pub fn grid(&self) -> usize {
        self.image / self.patch
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |m: &str| Err(ModelError::InvalidConfig(m.to_string()));
        if self.image != IMAGE_SIZE {
            return bad("image side must be 128");
        }
        if self.patch == 0 || self.image % self.patch != 0 {
            return bad("patch must divide the image side");
        }
        if self.embed_dim < 4 || self.embed_dim % 4 != 0 {
            return bad("embed_dim must be a positive multiple of 4");
        }
        if self.heads == 0 || self.embed_dim % self.heads != 0 {
            return bad("embed_dim must be divisible by heads");
        }
        if self.n_kinds != NUM_KINDS {
            return bad("n_kinds must be 4");
        }
        if self.n_queries == 0 || self.ffn_dim == 0 || self.enc_layers == 0 || self.dec_layers == 0 {
            return bad("layer counts, ffn_dim and n_queries must be positive");
        }
        Ok(())
    }
}

/// Interleaved `sin, cos` at `half_dim / 2` geometric frequencies:
/// `out[2k] = sin(2 pi x / 20^(2k / half_dim))`, `out[2k + 1]` the matching cosine.
pub fn sinusoidal_pe<T: Scalar>(x: T, half_dim: usize) -> Vec<T> {
    let mut out = Vec::with_capacity(half_dim);
    for k in 0..half_dim / 2 {
        let freq = PE_TEMPERATURE.powf(2.0 * k as f64 / half_dim as f64);
        let arg = x * T::TAU() / T::lit(freq);
        out.push(arg.sin());
        out.push(arg.cos());
    }
    out
}

/// Fixed 2-D encoding of every patch: row PE then column PE, each `D/2` long.
pub fn patch_position_encoding<T: Scalar>(cfg: &ModelConfig) -> Array<T> {
    let grid = cfg.grid();
    let half = cfg.embed_dim / 2;
    let mut data = Vec::with_capacity(cfg.tokens() * cfg.embed_dim);
    for r in 0..grid {
        for c in 0..grid {
            data.extend(sinusoidal_pe(T::lit((r as f64 + 0.5) / grid as f64), half));
            data.extend(sinusoidal_pe(T::lit((c as f64 + 0.5) / grid as f64), half));
        }
    }
    Array::new(&[cfg.tokens(), cfg.embed_dim], data).expect("pe shape")
}

/// Row-major 16 x 16 patches, each flattened row-major: `tokens x patch^2`.
pub fn patchify<T: Scalar>(cfg: &ModelConfig, image: &[T]) -> Result<Array<T>, ModelError> {
    let side = cfg.image;
    if image.len() != side * side {
        return Err(ModelError::BadImageShape { expected: side * side, found: image.len() });
    }
    let (grid, p) = (cfg.grid(), cfg.patch);
    let mut data = Vec::with_capacity(side * side);
    for pr in 0..grid {
        for pc in 0..grid {
            for y in 0..p {
                let start = (pr * p + y) * side + pc * p;
                data.extend_from_slice(&image[start..start + p]);
            }
        }
    }
    Ok(Array::new(&[cfg.tokens(), p * p], data).expect("patch shape"))
}

/// Model input from a raster: ink coverage, 0 for paper and 1 for solid stroke.
pub fn image_input<T: Scalar>(image: &RasterImage) -> Vec<T> {
    image.ink().into_iter().map(T::lit).collect()
}

/// Concatenated PE of the six parameters: `6 * D/2 = 3D` values.
pub fn param_encoding<T: Scalar>(params: &ParamVector, embed_dim: usize) -> Vec<T> {
    params.iter().flat_map(|&p| sinusoidal_pe(T::lit(p), embed_dim / 2)).collect()
}

/// Denoise-part decoder inputs for one image plus the full attention mask.
#[derive(Clone, Debug, PartialEq)]
pub struct DenoiseQueries {
    /// Per slot: the (possibly flipped) kind, or `None` for padding.
    pub kinds: Vec<Option<PrimitiveKind>>,
    /// Per slot: noised parameters in `[0, 1]` (all zero for padding).
    pub params: Vec<ParamVector>,
    /// Row-major `(M + N)^2` matrix, `true` = blocked.
    pub mask: Arc<[bool]>,
}

impl DenoiseQueries {
    /// No denoise slots: the matching queries see each other freely.
    pub fn empty(n_queries: usize) -> Self {
        Self { kinds: Vec::new(), params: Vec::new(), mask: vec![false; n_queries * n_queries].into() }
    }

    pub fn len(&self) -> usize {
        self.kinds.len()
    }

    pub fn is_empty(&self) -> bool {
        self.kinds.is_empty()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Training,
    Inference,
}

/// Graph handles for one forward pass; rows `0..n_denoise` are denoise queries.
#[derive(Clone, Copy, Debug)]
pub struct ForwardVars {
    pub logits: Var,
    pub params: Var,
    pub n_denoise: usize,
}

/// Plain per-query prediction.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct QueryPrediction {
    pub logits: [f64; 4],
    pub params: ParamVector,
}

impl QueryPrediction {
    pub fn probabilities(&self) -> [f64; 4] {
        self.logits.map(|z| 1.0 / (1.0 + (-z).exp()))
    }

    /// Largest per-kind probability.
    pub fn confidence(&self) -> f64 {
        self.probabilities().into_iter().fold(0.0, f64::max)
    }

    /// Argmax kind; ties go to the lower index.
    pub fn kind(&self) -> PrimitiveKind {
        let mut best = 0;
        for k in 1..NUM_KINDS {
            if self.logits[k] > self.logits[best] {
                best = k;
            }
        }
        PrimitiveKind::from_index(best).expect("kind index")
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DecoderOutput {
    pub rows: Vec<QueryPrediction>,
    pub n_denoise: usize,
}

impl DecoderOutput {
    pub fn matching(&self) -> &[QueryPrediction] {
        &self.rows[self.n_denoise..]
    }

    pub fn denoise(&self) -> &[QueryPrediction] {
        &self.rows[..self.n_denoise]
    }

    pub fn from_graph<T: Scalar>(g: &Graph<T>, out: &ForwardVars) -> Self {
        let (lv, pv) = (g.value(out.logits), g.value(out.params));
        let rows = (0..lv.dims2().0)
            .map(|r| QueryPrediction {
                logits: std::array::from_fn(|k| lv.at2(r, k).as_f64()),
                params: std::array::from_fn(|k| pv.at2(r, k).as_f64()),
            })
            .collect();
        Self { rows, n_denoise: out.n_denoise }
    }
}

#[derive(Clone, Copy, Debug)]
struct Linear {
    w: ParamId,
    b: ParamId,
}

#[derive(Clone, Copy, Debug)]
struct Norm {
    gain: ParamId,
    bias: ParamId,
}

#[derive(Clone, Debug)]
struct EncoderLayer {
    ln_attn: Norm,
    qkv: Linear,
    proj: Linear,
    ln_ffn: Norm,
    ff1: Linear,
    ff2: Linear,
}

#[derive(Clone, Debug)]
struct DecoderLayer {
    ln_self: Norm,
    self_qk: Linear,
    self_v: Linear,
    self_proj: Linear,
    ln_cross: Norm,
    cross_q: Linear,
    cross_kv: Linear,
    cross_proj: Linear,
    ln_ffn: Norm,
    ff1: Linear,
    ff2: Linear,
}

#[derive(Clone, Debug)]
struct Layout {
    patch_embed: Linear,
    encoder: Vec<EncoderLayer>,
    enc_norm: Norm,
    /// Rows 0..4 are the kinds, row 4 the "unknown" label of matching queries.
    label_embed: ParamId,
    match_pos: ParamId,
    pos_mlp1: Linear,
    pos_mlp2: Linear,
    decoder: Vec<DecoderLayer>,
    dec_norm: Norm,
    type_head: Linear,
    param_mlp: [Linear; 3],
}

const UNKNOWN_LABEL: usize = NUM_KINDS;

struct Builder<'a, T: Scalar, R: Rng> {
    store: &'a mut ParameterStore<T>,
    rng: R,
}

impl<T: Scalar, R: Rng> Builder<'_, T, R> {
    fn trunc_normal(&mut self, shape: &[usize]) -> Array<T> {
        let normal = Normal::new(0.0, INIT_STD).expect("valid std");
        let n: usize = shape.iter().product();
        let data = (0..n)
            .map(|_| loop {
                let v: f64 = normal.sample(&mut self.rng);
                if v.abs() <= 2.0 * INIT_STD {
                    break T::lit(v);
                }
            })
            .collect();
        Array::new(shape, data).expect("init shape")
    }

    /// Unit-variance table so the learned queries start out distinguishable.
    fn embedding(&mut self, name: &str, shape: &[usize]) -> ParamId {
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| T::lit(StandardNormal.sample(&mut self.rng))).collect();
        self.store.insert(name, Array::new(shape, data).expect("init shape")).expect("unique parameter name")
    }

    fn weight(&mut self, name: &str, shape: &[usize]) -> ParamId {
        let v = self.trunc_normal(shape);
        self.store.insert(name, v).expect("unique parameter name")
    }

    fn linear(&mut self, name: &str, fan_in: usize, fan_out: usize) -> Linear {
        let w = self.weight(&format!("{name}.w"), &[fan_in, fan_out]);
        let b = self.store.insert(&format!("{name}.b"), Array::zeros(&[1, fan_out])).expect("unique parameter name");
        Linear { w, b }
    }

    fn norm(&mut self, name: &str, width: usize) -> Norm {
        let gain = self.store.insert(&format!("{name}.gain"), Array::full(&[1, width], T::one())).expect("unique");
        let bias = self.store.insert(&format!("{name}.bias"), Array::zeros(&[1, width])).expect("unique");
        Norm { gain, bias }
    }
}

fn build_layout<T: Scalar>(cfg: &ModelConfig, store: &mut ParameterStore<T>, seed: u64) -> Layout {
    let d = cfg.embed_dim;
    let mut b = Builder { store, rng: seeds::rng(seed, 0x1417) };
    let patch_embed = b.linear("patch_embed", cfg.patch * cfg.patch, d);
    let encoder = (0..cfg.enc_layers)
        .map(|i| EncoderLayer {
            ln_attn: b.norm(&format!("enc{i}.ln_attn"), d),
            qkv: b.linear(&format!("enc{i}.qkv"), d, 3 * d),
            proj: b.linear(&format!("enc{i}.proj"), d, d),
            ln_ffn: b.norm(&format!("enc{i}.ln_ffn"), d),
            ff1: b.linear(&format!("enc{i}.ff1"), d, cfg.ffn_dim),
            ff2: b.linear(&format!("enc{i}.ff2"), cfg.ffn_dim, d),
        })
        .collect();
    let enc_norm = b.norm("enc_norm", d);
    let label_embed = b.weight("label_embed", &[NUM_KINDS + 1, d - 1]);
    let match_pos = b.embedding("match_pos", &[cfg.n_queries, d]);
    let pos_mlp1 = b.linear("pos_mlp1", 3 * d, d);
    let pos_mlp2 = b.linear("pos_mlp2", d, d);
    let decoder = (0..cfg.dec_layers)
        .map(|i| DecoderLayer {
            ln_self: b.norm(&format!("dec{i}.ln_self"), d),
            self_qk: b.linear(&format!("dec{i}.self_qk"), d, 2 * d),
            self_v: b.linear(&format!("dec{i}.self_v"), d, d),
            self_proj: b.linear(&format!("dec{i}.self_proj"), d, d),
            ln_cross: b.norm(&format!("dec{i}.ln_cross"), d),
            cross_q: b.linear(&format!("dec{i}.cross_q"), d, d),
            cross_kv: b.linear(&format!("dec{i}.cross_kv"), d, 2 * d),
            cross_proj: b.linear(&format!("dec{i}.cross_proj"), d, d),
            ln_ffn: b.norm(&format!("dec{i}.ln_ffn"), d),
            ff1: b.linear(&format!("dec{i}.ff1"), d, cfg.ffn_dim),
            ff2: b.linear(&format!("dec{i}.ff2"), cfg.ffn_dim, d),
        })
        .collect();
    let dec_norm = b.norm("dec_norm", d);
    let type_head = b.linear("type_head", d, NUM_KINDS);
    let param_mlp = [b.linear("param_mlp0", d, d), b.linear("param_mlp1", d, d), b.linear("param_mlp2", d, 6)];
    Layout {
        patch_embed,
        encoder,
        enc_norm,
        label_embed,
        match_pos,
        pos_mlp1,
        pos_mlp2,
        decoder,
        dec_norm,
        type_head,
        param_mlp,
    }
}

/// Network weights plus the fixed architecture that interprets them.
#[derive(Clone, Debug)]
pub struct Model<T: Scalar> {
    cfg: ModelConfig,
    store: ParameterStore<T>,
    layout: Layout,
    patch_pe: Array<T>,
}

/// Parameter leaves of one graph, indexed by [`ParamId::index`].
struct Bound(Vec<Var>);

impl Bound {
    fn get(&self, id: ParamId) -> Var {
        self.0[id.index()]
    }
}

impl<T: Scalar> Model<T> {
    pub fn new(cfg: ModelConfig, seed: u64) -> Result<Self, ModelError> {
        cfg.validate()?;
        let mut store = ParameterStore::new();
        let layout = build_layout(&cfg, &mut store, seed);
        let patch_pe = patch_position_encoding(&cfg);
        Ok(Self { cfg, store, layout, patch_pe })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn store(&self) -> &ParameterStore<T> {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParameterStore<T> {
        &mut self.store
    }

    /// Same weights in another precision (optimizer state is not carried).
    pub fn cast<U: Scalar>(&self) -> Model<U> {
        Model { cfg: self.cfg.clone(), store: self.store.cast(), layout: self.layout.clone(), patch_pe: self.patch_pe.cast() }
    }

    fn bind(&self, g: &mut Graph<T>) -> Bound {
        Bound(self.store.ids().map(|id| g.param(id, self.store.get(id).clone())).collect())
    }

    fn linear(&self, g: &mut Graph<T>, p: &Bound, l: Linear, x: Var) -> Var {
        let y = g.matmul(x, p.get(l.w));
        g.add_row(y, p.get(l.b))
    }

    fn norm(&self, g: &mut Graph<T>, p: &Bound, n: Norm, x: Var) -> Var {
        g.layer_norm(x, p.get(n.gain), p.get(n.bias))
    }

    fn ffn(&self, g: &mut Graph<T>, p: &Bound, ff1: Linear, ff2: Linear, x: Var) -> Var {
        let h = self.linear(g, p, ff1, x);
        let h = g.relu(h);
        self.linear(g, p, ff2, h)
    }

    /// Multi-head scaled dot-product attention over `D`-wide q, k, v.
    fn attention(&self, g: &mut Graph<T>, q: Var, k: Var, v: Var, mask: Option<&Arc<[bool]>>) -> Var {
        let dh = self.cfg.embed_dim / self.cfg.heads;
        let scale = T::lit(1.0 / (dh as f64).sqrt());
        let heads: Vec<Var> = (0..self.cfg.heads)
            .map(|h| {
                let qh = g.slice_cols(q, h * dh, dh);
                let kh = g.slice_cols(k, h * dh, dh);
                let vh = g.slice_cols(v, h * dh, dh);
                let s = g.matmul_nt(qh, kh);
                let s = g.scale(s, scale);
                let a = g.softmax_rows(s, mask.cloned());
                g.matmul(a, vh)
            })
            .collect();
        g.concat_cols(&heads)
    }

    fn encode(&self, g: &mut Graph<T>, p: &Bound, image: &[T]) -> Result<Var, ModelError> {
        let patches = g.constant(patchify(&self.cfg, image)?);
        let pe = g.constant(self.patch_pe.clone());
        let x = self.linear(g, p, self.layout.patch_embed, patches);
        let mut x = g.add(x, pe);
        let d = self.cfg.embed_dim;
        for layer in &self.layout.encoder {
            let h = self.norm(g, p, layer.ln_attn, x);
            let qkv = self.linear(g, p, layer.qkv, h);
            let q = g.slice_cols(qkv, 0, d);
            let k = g.slice_cols(qkv, d, d);
            let v = g.slice_cols(qkv, 2 * d, d);
            let a = self.attention(g, q, k, v, None);
            let a = self.linear(g, p, layer.proj, a);
            x = g.add(x, a);
            let h = self.norm(g, p, layer.ln_ffn, x);
            let f = self.ffn(g, p, layer.ff1, layer.ff2, h);
            x = g.add(x, f);
        }
        Ok(self.norm(g, p, self.layout.enc_norm, x))
    }

    /// `MLP(PE(params))` for every denoise slot: `M x D`, nonnegative.
    fn positional_queries(&self, g: &mut Graph<T>, p: &Bound, params: &[ParamVector]) -> Var {
        let d = self.cfg.embed_dim;
        let data: Vec<T> = params.iter().flat_map(|pv| param_encoding::<T>(pv, d)).collect();
        let enc = g.constant(Array::new(&[params.len(), 3 * d], data).expect("pe shape"));
        let h = self.linear(g, p, self.layout.pos_mlp1, enc);
        let h = g.relu(h);
        let h = self.linear(g, p, self.layout.pos_mlp2, h);
        g.relu(h)
    }

    /// Content queries: label embedding rows with the indicator appended.
    fn content_queries(&self, g: &mut Graph<T>, p: &Bound, labels: &[usize], indicator: T) -> Var {
        let emb = g.gather_rows(p.get(self.layout.label_embed), labels);
        let ind = g.constant(Array::full(&[labels.len(), 1], indicator));
        g.concat_cols(&[emb, ind])
    }

    fn check_denoise(&self, dn: &DenoiseQueries) -> Result<(), ModelError> {
        let m = dn.kinds.len();
        if dn.params.len() != m {
            return Err(ModelError::MaskShapeMismatch { expected: m, found: dn.params.len() });
        }
        let side = m + self.cfg.n_queries;
        if dn.mask.len() != side * side {
            return Err(ModelError::MaskShapeMismatch { expected: side, found: dn.mask.len() });
        }
        for (query, pv) in dn.params.iter().enumerate() {
            for (slot, &value) in pv.iter().enumerate() {
                if !(0.0..=1.0).contains(&value) {
                    return Err(ModelError::ParamOutOfRange { query, slot, value });
                }
            }
        }
        Ok(())
    }

    /// Records one forward pass. Training mode requires `denoise` (possibly
    /// with zero slots); inference mode forbids it and uses only the N matching queries.
    pub fn forward(
        &self,
        g: &mut Graph<T>,
        image: &[T],
        denoise: Option<&DenoiseQueries>,
        mode: Mode,
    ) -> Result<ForwardVars, ModelError> {
        let dn = match (mode, denoise) {
            (Mode::Training, Some(dn)) => {
                self.check_denoise(dn)?;
                Some(dn)
            }
            (Mode::Training, None) => return Err(ModelError::ModeMismatch("training requires denoise queries and a mask")),
            (Mode::Inference, Some(_)) => return Err(ModelError::ModeMismatch("inference takes no denoise queries")),
            (Mode::Inference, None) => None,
        };
        let p = self.bind(g);
        let memory = self.encode(g, &p, image)?;
        let n = self.cfg.n_queries;
        let d = self.cfg.embed_dim;

        let match_content = self.content_queries(g, &p, &vec![UNKNOWN_LABEL; n], T::zero());
        let match_pos = p.get(self.layout.match_pos);
        let m = dn.map_or(0, |dn| dn.len());
        let (mut x, pos, mask) = match dn {
            Some(dn) if m > 0 => {
                let labels: Vec<usize> = dn.kinds.iter().map(|k| k.map_or(UNKNOWN_LABEL, |k| k.index())).collect();
                let dn_content = self.content_queries(g, &p, &labels, T::one());
                let dn_pos = self.positional_queries(g, &p, &dn.params);
                let x = g.concat_rows(&[dn_content, match_content]);
                let pos = g.concat_rows(&[dn_pos, match_pos]);
                (x, pos, Some(&dn.mask))
            }
            Some(dn) => (match_content, match_pos, Some(&dn.mask)),
            None => (match_content, match_pos, None),
        };

        for layer in &self.layout.decoder {
            let h = self.norm(g, &p, layer.ln_self, x);
            let hp = g.add(h, pos);
            let qk = self.linear(g, &p, layer.self_qk, hp);
            let q = g.slice_cols(qk, 0, d);
            let k = g.slice_cols(qk, d, d);
            let v = self.linear(g, &p, layer.self_v, h);
            let a = self.attention(g, q, k, v, mask);
            let a = self.linear(g, &p, layer.self_proj, a);
            x = g.add(x, a);

            let h = self.norm(g, &p, layer.ln_cross, x);
            let hp = g.add(h, pos);
            let q = self.linear(g, &p, layer.cross_q, hp);
            let kv = self.linear(g, &p, layer.cross_kv, memory);
            let k = g.slice_cols(kv, 0, d);
            let v = g.slice_cols(kv, d, d);
            let a = self.attention(g, q, k, v, None);
            let a = self.linear(g, &p, layer.cross_proj, a);
            x = g.add(x, a);

            let h = self.norm(g, &p, layer.ln_ffn, x);
            let f = self.ffn(g, &p, layer.ff1, layer.ff2, h);
            x = g.add(x, f);
        }
        let h = self.norm(g, &p, self.layout.dec_norm, x);
        let logits = self.linear(g, &p, self.layout.type_head, h);
        let [l0, l1, l2] = self.layout.param_mlp;
        let t = self.linear(g, &p, l0, h);
        let t = g.relu(t);
        let t = self.linear(g, &p, l1, t);
        let t = g.relu(t);
        let t = self.linear(g, &p, l2, t);
        let params = g.sigmoid(t);
        Ok(ForwardVars { logits, params, n_denoise: m })
    }

    /// Inference-mode forward returning plain predictions for the N matching queries.
    pub fn predict(&self, image: &[T]) -> Result<DecoderOutput, ModelError> {
        let mut g = Graph::new();
        let out = self.forward(&mut g, image, None, Mode::Inference)?;
        Ok(DecoderOutput::from_graph(&g, &out))
    }

    /// Checkpoint bytes: magic, version, config JSON, then every named array as f32.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        let cfg = serde_json::to_vec(&self.cfg).expect("config serializes");
        out.extend_from_slice(&(cfg.len() as u32).to_le_bytes());
        out.extend_from_slice(&cfg);
        out.extend_from_slice(&(self.store.len() as u32).to_le_bytes());
        for (name, value) in self.store.iter() {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(value.rank() as u32).to_le_bytes());
            for &e in value.shape() {
                out.extend_from_slice(&(e as u32).to_le_bytes());
            }
            for &v in value.data() {
                out.extend_from_slice(&(v.as_f64() as f32).to_le_bytes());
            }
        }
        out
    }

    /// Parses a checkpoint. With `expected`, a differing stored config is rejected.
    pub fn from_bytes(bytes: &[u8], expected: Option<&ModelConfig>) -> Result<Self, ModelError> {
        let mut r = bytes;
        let mut magic = [0u8; 4];
        read_exact(&mut r, &mut magic)?;
        if &magic != CHECKPOINT_MAGIC {
            return Err(ModelError::Format("bad magic".into()));
        }
        let version = read_u32(&mut r)?;
        if version != CHECKPOINT_VERSION {
            return Err(ModelError::VersionMismatch { found: version, expected: CHECKPOINT_VERSION });
        }
        let cfg_len = read_u32(&mut r)? as usize;
        let cfg_bytes = read_vec(&mut r, cfg_len)?;
        let cfg: ModelConfig =
            serde_json::from_slice(&cfg_bytes).map_err(|e| ModelError::Format(format!("config: {e}")))?;
        if expected.is_some_and(|e| *e != cfg) {
            return Err(ModelError::ConfigMismatch);
        }
        let mut model = Self::new(cfg, 0)?;
        let count = read_u32(&mut r)? as usize;
        if count != model.store.len() {
            return Err(ModelError::Format(format!("expected {} arrays, found {count}", model.store.len())));
        }
        let mut seen = vec![false; count];
        for _ in 0..count {
            let name_len = read_u32(&mut r)? as usize;
            let name = String::from_utf8(read_vec(&mut r, name_len)?)
                .map_err(|_| ModelError::Format("array name is not UTF-8".into()))?;
            let rank = read_u32(&mut r)? as usize;
            let shape = (0..rank).map(|_| read_u32(&mut r).map(|e| e as usize)).collect::<Result<Vec<_>, _>>()?;
            let id = model.store.id(&name).ok_or_else(|| ModelError::Format(format!("unknown array {name}")))?;
            if model.store.get(id).shape() != shape.as_slice() || seen[id.index()] {
                return Err(ModelError::Format(format!("array {name} has the wrong shape or repeats")));
            }
            seen[id.index()] = true;
            let n: usize = shape.iter().product();
            let raw = read_vec(&mut r, n.checked_mul(4).ok_or_else(|| ModelError::Format("array too large".into()))?)?;
            let data = raw
                .chunks_exact(4)
                .map(|c| T::lit(f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64))
                .collect();
            *model.store.get_mut(id) = Array::new(&shape, data)?;
        }
        if !r.is_empty() {
            return Err(ModelError::Format("trailing bytes".into()));
        }
        Ok(model)
    }

    pub fn save(&self, path: &Path) -> Result<(), ModelError> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path, expected: Option<&ModelConfig>) -> Result<Self, ModelError> {
        Self::from_bytes(&std::fs::read(path)?, expected)
    }
}

fn read_exact(r: &mut &[u8], buf: &mut [u8]) -> Result<(), ModelError> {
    r.read_exact(buf).map_err(|_| ModelError::Format("truncated checkpoint".into()))
}

fn read_u32(r: &mut &[u8]) -> Result<u32, ModelError> {
    let mut b = [0u8; 4];
    read_exact(r, &mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_vec(r: &mut &[u8], n: usize) -> Result<Vec<u8>, ModelError> {
    if n > r.len() {
        return Err(ModelError::Format("truncated checkpoint".into()));
    }
    let mut v = vec![0; n];
    read_exact(r, &mut v)?;
    Ok(v)
}
