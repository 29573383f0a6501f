//! Training loop, regimens and single-image inference.
//!
//! A step draws a batch, builds the denoise groups, records one graph per
//! image, matches its N outputs to the ground truth, and accumulates the
//! gradients of the batch-mean loss before one AdamW update. Everything is
//! single-threaded and seeded, so equal configs give equal checkpoints.

use std::io::Write as _;
use std::path::{Path, PathBuf};

use log::{debug, info};
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::assignment::{cost_matrix, denoise_losses, hungarian, matching_losses, total_loss, Assignment, AssignmentError, CostWeights};
use crate::dataset::Sketch;
use crate::denoise::{build_groups, DenoiseBatch, DenoiseConfig};
use crate::geometry::{Primitive, PrimitiveKind};
use crate::handdraw::{affine_augment, render_precise, render_samples, AffineConfig, HanddrawError, NoiseConfig, RasterImage};
use crate::metrics::{evaluate, EvalError, EvalReport, EvalSample, EvalThresholds};
use crate::model::{image_input, DecoderOutput, Mode, Model, ModelConfig, ModelError};
use crate::numcore::{adamw_step, onecycle_lr, AdamWConfig, Graph, NumError, OneCycleConfig, Var};
use crate::scalar::Scalar;
use crate::seeds;

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("invalid training config: {0}")]
    InvalidConfig(String),
    #[error("non-finite loss at step {step} on sketch {sketch}: terms {terms:?}")]
    NonFiniteLoss { step: usize, sketch: String, terms: [f64; 6] },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Num(#[from] NumError),
    #[error(transparent)]
    Assignment(#[from] AssignmentError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Render(#[from] HanddrawError),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Regimen {
    Precise,
    Handdrawn,
    HanddrawnAffine,
}

impl std::str::FromStr for Regimen {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "precise" => Ok(Self::Precise),
            "handdrawn" | "hand" => Ok(Self::Handdrawn),
            "handdrawn-affine" | "handdrawn+affine" => Ok(Self::HanddrawnAffine),
            _ => Err(format!("unknown regimen {s:?}")),
        }
    }
}

/// Stop once a validation pass meets both targets.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StopRule {
    pub type_acc: f64,
    pub mean_cd: f64,
}

impl StopRule {
    pub fn met(&self, r: &EvalReport) -> bool {
        r.type_acc >= self.type_acc && r.mean_cd <= self.mean_cd
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub regimen: Regimen,
    pub epochs: usize,
    /// Caps the step count below `epochs * batches_per_epoch`.
    pub max_steps: Option<usize>,
    /// Stops after this many steps without shortening the schedule.
    pub halt_after: Option<usize>,
    pub batch_size: usize,
    pub model: ModelConfig,
    pub denoise: DenoiseConfig,
    pub weights: CostWeights,
    /// `total_steps` and `batch_size` are filled in from the run.
    pub schedule: OneCycleConfig,
    pub adamw: AdamWConfig,
    /// Global gradient-norm clip; `None` disables it.
    pub grad_clip: Option<f64>,
    pub noise: NoiseConfig,
    pub affine: AffineConfig,
    pub val_every: usize,
    pub stop: Option<StopRule>,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self::desk(Regimen::HanddrawnAffine)
    }
}

impl TrainConfig {
    /// Laptop-scale defaults: tiny model, batch 32.
    pub fn desk(regimen: Regimen) -> Self {
        Self {
            regimen,
            epochs: 20,
            max_steps: None,
            halt_after: None,
            batch_size: 32,
            model: ModelConfig::tiny(),
            denoise: DenoiseConfig::default(),
            weights: CostWeights::default(),
            schedule: OneCycleConfig::default(),
            adamw: AdamWConfig::default(),
            grad_clip: None,
            noise: NoiseConfig::default(),
            affine: AffineConfig::default(),
            val_every: 200,
            stop: None,
            seed: 0,
        }
    }

    /// Published full-scale settings; far beyond a CPU budget.
    pub fn paper(regimen: Regimen) -> Self {
        Self { epochs: 250, batch_size: 256, model: ModelConfig::full(), ..Self::desk(regimen) }
    }

    /// Overfit run on a small precise corpus. The published rate is meant for
    /// batch 128 over millions of images; a 64-image memorisation run needs a
    /// far larger step. Much above 3e-3, or without clipping, the matching
    /// stalls near 70% type accuracy; the long warm-up gets the queries past
    /// that plateau before the peak.
    pub fn smoke() -> Self {
        Self {
            epochs: 1000,
            max_steps: Some(2000),
            batch_size: 16,
            schedule: OneCycleConfig { peak_lr: 3e-3, reference_batch: 16, warmup_fraction: 0.3, ..OneCycleConfig::default() },
            adamw: AdamWConfig { weight_decay: 0.0, ..AdamWConfig::default() },
            grad_clip: Some(0.5),
            val_every: 100,
            stop: Some(StopRule { type_acc: 0.95, mean_cd: 0.02 }),
            ..Self::desk(Regimen::Precise)
        }
    }

    pub fn validate(&self) -> Result<(), PipelineError> {
        let bad = |m: String| Err(PipelineError::InvalidConfig(m));
        if self.batch_size == 0 || self.epochs == 0 || self.val_every == 0 {
            return bad("batch_size, epochs and val_every must be positive".into());
        }
        if self.max_steps == Some(0) {
            return bad("max_steps must be positive".into());
        }
        if self.grad_clip.is_some_and(|c| !(c > 0.0)) {
            return bad("grad_clip must be positive".into());
        }
        self.model.validate()?;
        self.denoise.validate().map_err(PipelineError::InvalidConfig)?;
        self.noise.validate()?;
        Ok(())
    }

    pub fn total_steps(&self, train_len: usize) -> usize {
        let per_epoch = train_len.div_ceil(self.batch_size);
        let full = self.epochs * per_epoch;
        self.max_steps.map_or(full, |m| m.min(full))
    }

    /// Renders per sketch: one for precise, the configured sample count otherwise.
    pub fn render_count(&self) -> usize {
        match self.regimen {
            Regimen::Precise => 1,
            _ => self.noise.samples_per_sketch,
        }
    }
}

/// A sketch with its pre-rendered images.
#[derive(Clone, Debug)]
pub struct TrainItem {
    pub sketch: Sketch,
    pub renders: Vec<RasterImage>,
}

/// Renders every sketch for the regimen; sketch `i` uses seed `mix_seed(seed, i)`.
pub fn prepare_items(sketches: &[Sketch], regimen: Regimen, noise: &NoiseConfig, seed: u64) -> Result<Vec<TrainItem>, PipelineError> {
    sketches
        .iter()
        .enumerate()
        .map(|(i, s)| {
            let renders = match regimen {
                Regimen::Precise => vec![render_precise(s)],
                _ => render_samples(s, noise, seeds::mix_seed(seed, i as u64))?,
            };
            Ok(TrainItem { sketch: s.clone(), renders })
        })
        .collect()
}

/// Evaluation samples from the first render of each item.
pub fn eval_samples(items: &[TrainItem]) -> Vec<EvalSample> {
    items
        .iter()
        .map(|it| EvalSample { id: it.sketch.id.clone(), image: it.renders[0].clone(), gts: it.sketch.primitives.clone() })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "snake_case")]
pub enum HistoryRecord {
    Step {
        step: usize,
        lr: f64,
        loss: f64,
        /// Batch means of the matching class, param and cd terms.
        matching: [f64; 3],
        /// Batch means of the denoise terms; zeros without groups.
        denoise: [f64; 3],
    },
    Validation {
        step: usize,
        type_acc: f64,
        mean_cd: f64,
        precision: f64,
        recall: f64,
    },
}

pub struct TrainOutcome {
    pub model: Model<f32>,
    /// Checkpoint bytes of the best validation pass by mean CD.
    pub best_checkpoint: Option<Vec<u8>>,
    pub best_mean_cd: Option<f64>,
    pub history: Vec<HistoryRecord>,
    pub steps_run: usize,
    /// First validated step meeting the stop rule.
    pub target_step: Option<usize>,
}

impl TrainOutcome {
    pub fn history_jsonl(&self) -> String {
        self.history.iter().map(|r| serde_json::to_string(r).expect("history serializes") + "\n").collect()
    }

    pub fn losses(&self) -> Vec<f64> {
        self.history
            .iter()
            .filter_map(|r| match r {
                HistoryRecord::Step { loss, .. } => Some(*loss),
                HistoryRecord::Validation { .. } => None,
            })
            .collect()
    }
}

/// Where to write artifacts while training; all optional.
#[derive(Clone, Debug, Default)]
pub struct TrainOutputs {
    pub history: Option<PathBuf>,
    pub best_checkpoint: Option<PathBuf>,
}

struct StepStats {
    loss: f64,
    matching: [f64; 3],
    denoise: [f64; 3],
}

/// Loss of one image recorded on `g`.
pub struct ImageLoss {
    pub loss: Var,
    /// Matching class, param, cd, then denoise class, param, cd.
    pub terms: [f64; 6],
    pub assignment: Assignment,
}

/// Forward plus loss for image `index` of `dn`. The assignment is solved
/// from the current outputs unless `fixed` supplies one.
#[allow(clippy::too_many_arguments)]
pub fn image_loss<T: Scalar>(
    g: &mut Graph<T>,
    model: &Model<T>,
    weights: &CostWeights,
    image: &[T],
    gts: &[Primitive],
    dn: &DenoiseBatch,
    index: usize,
    fixed: Option<&Assignment>,
) -> Result<ImageLoss, PipelineError> {
    let queries = dn.queries(index);
    let out = model.forward(g, image, Some(&queries), Mode::Training)?;
    let assignment = match fixed {
        Some(a) => a.clone(),
        None => {
            let decoded = DecoderOutput::from_graph(g, &out);
            hungarian(&cost_matrix(decoded.matching(), gts, weights)?)?
        }
    };
    let m = matching_losses(g, &out, model.config().n_queries, &assignment, gts);
    let d = denoise_losses(g, &out, dn, index, gts);
    let loss = total_loss(g, &m, d.as_ref(), weights);
    let mv = m.values(g);
    let dv = d.map_or([0.0; 3], |d| d.values(g));
    Ok(ImageLoss { loss, terms: [mv[0], mv[1], mv[2], dv[0], dv[1], dv[2]], assignment })
}

fn clip_global_norm<T: Scalar>(grads: &mut [Vec<T>], max_norm: f64) {
    let norm = grads.iter().flatten().map(|x| x.as_f64().powi(2)).sum::<f64>().sqrt();
    if norm > max_norm {
        let s = T::lit(max_norm / norm);
        grads.iter_mut().flatten().for_each(|x| *x *= s);
    }
}

fn pick_image(item: &TrainItem, regimen: Regimen, affine: &AffineConfig, rng: &mut impl Rng) -> RasterImage {
    let k = rng.random_range(0..item.renders.len());
    let base = &item.renders[k];
    match regimen {
        Regimen::HanddrawnAffine => affine_augment(base, affine, rng.random()),
        _ => base.clone(),
    }
}

/// Trains from a fresh model. Batches are reshuffled each epoch from stream
/// `epoch`; the denoise groups of step `s` use seed `mix_seed(seed, s)`.
pub fn train(cfg: &TrainConfig, train_items: &[TrainItem], val: &[EvalSample], outputs: &TrainOutputs) -> Result<TrainOutcome, PipelineError> {
    cfg.validate()?;
    if train_items.is_empty() {
        return Err(PipelineError::InvalidConfig("empty training set".into()));
    }
    let mut model = Model::<f32>::new(cfg.model.clone(), cfg.seed)?;
    let total = cfg.total_steps(train_items.len());
    let schedule = OneCycleConfig { total_steps: total, batch_size: cfg.batch_size, ..cfg.schedule };
    schedule.validate()?;
    let thresholds = EvalThresholds::default();
    let mut history_file = match &outputs.history {
        Some(p) => Some(std::io::BufWriter::new(std::fs::File::create(p)?)),
        None => None,
    };
    let mut history = Vec::new();
    let mut record = |r: HistoryRecord, history: &mut Vec<HistoryRecord>| -> Result<(), PipelineError> {
        if let Some(f) = history_file.as_mut() {
            writeln!(f, "{}", serde_json::to_string(&r).expect("history serializes"))?;
        }
        history.push(r);
        Ok(())
    };

    let mut order: Vec<usize> = Vec::new();
    let mut cursor = 0;
    let mut epoch = 0u64;
    let mut pick_rng = seeds::rng(cfg.seed, u64::MAX);
    let mut best: Option<(f64, Vec<u8>)> = None;
    let mut target_step = None;
    let mut step = 0;
    let end = cfg.halt_after.map_or(total, |h| h.min(total));
    while step < end {
        let mut batch = Vec::with_capacity(cfg.batch_size);
        while batch.len() < cfg.batch_size.min(train_items.len()) {
            if cursor == order.len() {
                order = (0..train_items.len()).collect();
                order.shuffle(&mut seeds::rng(cfg.seed, epoch));
                epoch += 1;
                cursor = 0;
            }
            batch.push(order[cursor]);
            cursor += 1;
        }
        let sketches: Vec<Sketch> = batch.iter().map(|&i| train_items[i].sketch.clone()).collect();
        let dn = build_groups(&sketches, &cfg.denoise, cfg.model.n_queries, seeds::mix_seed(cfg.seed, step as u64));
        let mut grads = model.store().zero_grads();
        let weight = 1.0 / batch.len() as f32;
        let mut stats = StepStats { loss: 0.0, matching: [0.0; 3], denoise: [0.0; 3] };
        for (slot, &i) in batch.iter().enumerate() {
            let item = &train_items[i];
            let img = pick_image(item, cfg.regimen, &cfg.affine, &mut pick_rng);
            let mut g = Graph::new();
            let il = image_loss(&mut g, &model, &cfg.weights, &image_input(&img), &item.sketch.primitives, &dn, slot, None)?;
            let (terms, value) = (il.terms, g.scalar(il.loss).as_f64());
            if !value.is_finite() {
                return Err(PipelineError::NonFiniteLoss { step, sketch: item.sketch.id.clone(), terms });
            }
            for (pid, grad) in g.backward(il.loss)?.params() {
                for (acc, &x) in grads[pid.index()].iter_mut().zip(grad) {
                    *acc += weight * x;
                }
            }
            stats.loss += value / batch.len() as f64;
            for k in 0..3 {
                stats.matching[k] += terms[k] / batch.len() as f64;
                stats.denoise[k] += terms[3 + k] / batch.len() as f64;
            }
        }
        if let Some(c) = cfg.grad_clip {
            clip_global_norm(&mut grads, c);
        }
        let lr = onecycle_lr(step, &schedule)?;
        adamw_step(model.store_mut(), &grads, lr, &cfg.adamw)?;
        step += 1;
        record(
            HistoryRecord::Step { step, lr, loss: stats.loss, matching: stats.matching, denoise: stats.denoise },
            &mut history,
        )?;
        debug!("step {step}/{total} loss {:.5}", stats.loss);

        if (step % cfg.val_every == 0 || step == end) && !val.is_empty() {
            let report = evaluate(&model, val, &thresholds)?;
            info!("step {step}: type_acc {:.4} mean_cd {:.5}", report.type_acc, report.mean_cd);
            record(
                HistoryRecord::Validation {
                    step,
                    type_acc: report.type_acc,
                    mean_cd: report.mean_cd,
                    precision: report.precision,
                    recall: report.recall,
                },
                &mut history,
            )?;
            if best.as_ref().is_none_or(|(cd, _)| report.mean_cd < *cd) {
                let bytes = model.to_bytes();
                if let Some(p) = &outputs.best_checkpoint {
                    std::fs::write(p, &bytes)?;
                }
                best = Some((report.mean_cd, bytes));
            }
            if cfg.stop.is_some_and(|s| s.met(&report)) {
                target_step = Some(step);
                break;
            }
        }
    }
    let (best_mean_cd, best_checkpoint) = best.map_or((None, None), |(c, b)| (Some(c), Some(b)));
    Ok(TrainOutcome { model, best_checkpoint, best_mean_cd, history, steps_run: step, target_step })
}

/// One detected primitive.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub primitive: Primitive,
    pub confidence: f64,
}

/// Inference-mode forward; keeps queries with confidence above `threshold`,
/// typed by argmax and masked to the kind's slots.
pub fn infer<T: Scalar>(model: &Model<T>, image: &RasterImage, threshold: f64) -> Result<Vec<Detection>, PipelineError> {
    let out = model.predict(&image_input(image))?;
    Ok(out
        .matching()
        .iter()
        .filter(|q| q.confidence() > threshold)
        .map(|q| {
            let kind: PrimitiveKind = q.kind();
            let params = q.params.map(|v| v.clamp(0.0, 1.0));
            let primitive = Primitive::raw(kind, params).expect("sigmoid outputs are finite");
            Detection { primitive, confidence: q.confidence() }
        })
        .collect())
}

/// Loads a checkpoint, checking it against `expected` when given.
pub fn load_checkpoint(path: &Path, expected: Option<&ModelConfig>) -> Result<Model<f32>, PipelineError> {
    Ok(Model::load(path, expected)?)
}

/// Worst relative error between backward and central-difference gradients of
/// `loss` with respect to model parameters. Checks the `per_tensor` largest
/// analytic entries of every parameter tensor.
pub fn model_grad_check<F>(model: &Model<f64>, loss: F, per_tensor: usize, eps: f64) -> f64
where
    F: Fn(&Model<f64>, &mut Graph<f64>) -> Var,
{
    let mut g = Graph::new();
    let out = loss(model, &mut g);
    let grads = g.backward(out).expect("finite scalar loss");
    let mut analytic = model.store().zero_grads();
    for (pid, grad) in grads.params() {
        analytic[pid.index()].copy_from_slice(grad);
    }
    let eval = |m: &Model<f64>| {
        let mut g = Graph::new();
        let v = loss(m, &mut g);
        g.scalar(v)
    };
    let mut probe = model.clone();
    let mut worst: f64 = 0.0;
    for (id, grad) in model.store().ids().zip(&analytic) {
        let mut order: Vec<usize> = (0..grad.len()).collect();
        order.sort_by(|&a, &b| grad[b].abs().total_cmp(&grad[a].abs()).then(a.cmp(&b)));
        for &c in order.iter().take(per_tensor) {
            let orig = probe.store().get(id).data()[c];
            probe.store_mut().get_mut(id).data_mut()[c] = orig + eps;
            let plus = eval(&probe);
            probe.store_mut().get_mut(id).data_mut()[c] = orig - eps;
            let minus = eval(&probe);
            probe.store_mut().get_mut(id).data_mut()[c] = orig;
            let numeric = (plus - minus) / (2.0 * eps);
            worst = worst.max(crate::numcore::relative_error(grad[c], numeric));
        }
    }
    worst
}
