//! Evaluation: type accuracy, Chamfer distance, precision and recall.
//!
//! Predictions are matched to ground truth by Chamfer distance alone, each
//! prediction sampled under its argmax kind. Per matched pair with confidence
//! `c` and distance `d`:
//!
//! | condition              | count |
//! |------------------------|-------|
//! | `c > tau_con, d < tau_cd` | TP |
//! | `c > tau_con, d > tau_cd` | FP |
//! | `c < tau_con, d > tau_cd` | FN |
//!
//! Other matched cells count nothing. Unmatched predictions with `c > tau_con`
//! count FP and unmatched ground truth counts FN; both are kept apart from the
//! matched-pair counts in [`Counts`].

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::assignment::{hungarian, Assignment, AssignmentError};
use crate::geometry::{chamfer, sample_points, Primitive, PrimitiveKind, CD_SAMPLES, NUM_KINDS};
use crate::handdraw::RasterImage;
use crate::model::{image_input, Model, ModelError, QueryPrediction};
use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalThresholds {
    pub tau_con: f64,
    pub tau_cd: f64,
}

impl Default for EvalThresholds {
    fn default() -> Self {
        Self { tau_con: 0.5, tau_cd: 0.4 }
    }
}

/// CD-only matching of one image: `assignment[j]` is the query for object `j`, `cds[j]` its distance.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalMatch {
    pub assignment: Assignment,
    pub cds: Vec<f64>,
}

pub fn eval_match(preds: &[QueryPrediction], gts: &[Primitive]) -> Result<EvalMatch, AssignmentError> {
    if gts.len() > preds.len() {
        return Err(AssignmentError::SizeError { gts: gts.len(), queries: preds.len() });
    }
    let pred_samples: Vec<Vec<[f64; 2]>> = preds.iter().map(|p| sample_points(p.kind(), &p.params, CD_SAMPLES)).collect();
    let costs: Vec<Vec<f64>> = gts
        .iter()
        .map(|gt| {
            let gs = gt.sample(CD_SAMPLES);
            pred_samples.iter().map(|ps| chamfer(ps, &gs).expect("samples are nonempty")).collect()
        })
        .collect();
    let assignment = hungarian(&costs)?;
    let cds = assignment.0.iter().enumerate().map(|(j, &q)| costs[j][q]).collect();
    Ok(EvalMatch { assignment, cds })
}

/// Number of matched pairs whose argmax kind equals the ground-truth kind.
pub fn correct_types(preds: &[QueryPrediction], gts: &[Primitive], m: &EvalMatch) -> usize {
    m.assignment.0.iter().zip(gts).filter(|(&q, gt)| preds[q].kind() == gt.kind).count()
}

/// Fraction of ground-truth objects whose matched prediction has the right kind.
pub fn type_accuracy(preds: &[QueryPrediction], gts: &[Primitive], m: &EvalMatch) -> f64 {
    if gts.is_empty() {
        return 0.0;
    }
    correct_types(preds, gts, m) as f64 / gts.len() as f64
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Counts {
    pub tp: usize,
    /// Confident matched predictions beyond the distance threshold.
    pub fp_matched: usize,
    /// Confident predictions left without a ground-truth partner.
    pub fp_unmatched: usize,
    /// Unconfident matched predictions beyond the distance threshold.
    pub fn_matched: usize,
    /// Ground-truth objects left without a prediction.
    pub fn_unmatched: usize,
}

impl Counts {
    pub fn fp(&self) -> usize {
        self.fp_matched + self.fp_unmatched
    }

    pub fn fn_total(&self) -> usize {
        self.fn_matched + self.fn_unmatched
    }
}

impl std::ops::AddAssign for Counts {
    fn add_assign(&mut self, o: Self) {
        self.tp += o.tp;
        self.fp_matched += o.fp_matched;
        self.fp_unmatched += o.fp_unmatched;
        self.fn_matched += o.fn_matched;
        self.fn_unmatched += o.fn_unmatched;
    }
}

/// Classification of one matched pair.
pub fn classify_pair(confidence: f64, cd: f64, t: &EvalThresholds) -> Counts {
    let mut c = Counts::default();
    let confident = confidence > t.tau_con;
    if confident && cd < t.tau_cd {
        c.tp = 1;
    } else if confident && cd > t.tau_cd {
        c.fp_matched = 1;
    } else if confidence < t.tau_con && cd > t.tau_cd {
        c.fn_matched = 1;
    }
    c
}

/// Counts for one image. Every ground-truth object is matched when `K <= N`,
/// so `fn_unmatched` is nonzero only when `gts` outnumber `preds`.
pub fn tp_fp_fn(preds: &[QueryPrediction], m: &EvalMatch, n_gts: usize, t: &EvalThresholds) -> Counts {
    let mut total = Counts::default();
    for (&q, &cd) in m.assignment.0.iter().zip(&m.cds) {
        total += classify_pair(preds[q].confidence(), cd, t);
    }
    total.fp_unmatched = m.assignment.unmatched(preds.len()).into_iter().filter(|&q| preds[q].confidence() > t.tau_con).count();
    total.fn_unmatched = n_gts - m.assignment.len();
    total
}

/// `(TP / (TP + FP), TP / (TP + FN))`, each 0 when its denominator is 0.
pub fn precision_recall(c: &Counts) -> (f64, f64) {
    let ratio = |num: usize, den: usize| if den == 0 { 0.0 } else { num as f64 / den as f64 };
    (ratio(c.tp, c.tp + c.fp()), ratio(c.tp, c.tp + c.fn_total()))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KindCd {
    pub kind: String,
    pub count: usize,
    /// `None` when the kind never occurs in the ground truth.
    pub mean_cd: Option<f64>,
    pub absent: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImageRow {
    pub id: String,
    pub objects: usize,
    pub correct_types: usize,
    pub cd_sum: f64,
    pub counts: Counts,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub thresholds: EvalThresholds,
    pub images: usize,
    pub objects: usize,
    pub type_acc: f64,
    pub mean_cd: f64,
    pub precision: f64,
    pub recall: f64,
    pub counts: Counts,
    pub per_kind: Vec<KindCd>,
    pub rows: Vec<ImageRow>,
}

impl EvalReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    /// One line per image: id, objects, type_acc, mean_cd, tp, fp, fn.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("id,objects,type_acc,mean_cd,tp,fp,fn\n");
        for r in &self.rows {
            let k = r.objects.max(1) as f64;
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{}",
                r.id,
                r.objects,
                r.correct_types as f64 / k,
                r.cd_sum / k,
                r.counts.tp,
                r.counts.fp(),
                r.counts.fn_total()
            );
        }
        out
    }
}

/// One evaluation item.
#[derive(Clone, Debug)]
pub struct EvalSample {
    pub id: String,
    pub image: RasterImage,
    pub gts: Vec<Primitive>,
}

/// Anything producing the N matching-query predictions for an image.
pub trait Predictor {
    fn predict(&self, sample: &EvalSample) -> Result<Vec<QueryPrediction>, ModelError>;
}

impl<T: Scalar> Predictor for Model<T> {
    fn predict(&self, sample: &EvalSample) -> Result<Vec<QueryPrediction>, ModelError> {
        Ok(Model::predict(self, &image_input(&sample.image))?.matching().to_vec())
    }
}

/// Emits the ground truth itself with saturated logits, padded with silent queries.
#[derive(Clone, Copy, Debug)]
pub struct OraclePredictor {
    pub n_queries: usize,
}

const ORACLE_LOGIT: f64 = 20.0;

impl Predictor for OraclePredictor {
    fn predict(&self, sample: &EvalSample) -> Result<Vec<QueryPrediction>, ModelError> {
        let silent = QueryPrediction { logits: [-ORACLE_LOGIT; NUM_KINDS], params: [0.0; 6] };
        let mut out = vec![silent; self.n_queries.max(sample.gts.len())];
        for (slot, gt) in out.iter_mut().zip(&sample.gts) {
            slot.params = gt.params;
            slot.logits[gt.kind.index()] = ORACLE_LOGIT;
        }
        Ok(out)
    }
}

#[derive(Debug, thiserror::Error)]
pub enum EvalError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("sample {id}: {source}")]
    Assignment { id: String, source: AssignmentError },
}

/// Aggregates over `samples` in order. Type accuracy and mean CD are weighted by object count.
pub fn evaluate<P: Predictor + ?Sized>(predictor: &P, samples: &[EvalSample], t: &EvalThresholds) -> Result<EvalReport, EvalError> {
    let mut rows = Vec::with_capacity(samples.len());
    let mut kind_sum = [0.0; NUM_KINDS];
    let mut kind_count = [0usize; NUM_KINDS];
    for s in samples {
        let preds = predictor.predict(s)?;
        let m = eval_match(&preds, &s.gts).map_err(|source| EvalError::Assignment { id: s.id.clone(), source })?;
        for (gt, &cd) in s.gts.iter().zip(&m.cds) {
            kind_sum[gt.kind.index()] += cd;
            kind_count[gt.kind.index()] += 1;
        }
        rows.push(ImageRow {
            id: s.id.clone(),
            objects: s.gts.len(),
            correct_types: correct_types(&preds, &s.gts, &m),
            cd_sum: m.cds.iter().sum(),
            counts: tp_fp_fn(&preds, &m, s.gts.len(), t),
        });
    }
    Ok(summarize(rows, kind_sum, kind_count, *t))
}

fn summarize(rows: Vec<ImageRow>, kind_sum: [f64; NUM_KINDS], kind_count: [usize; NUM_KINDS], t: EvalThresholds) -> EvalReport {
    let objects: usize = rows.iter().map(|r| r.objects).sum();
    let correct: usize = rows.iter().map(|r| r.correct_types).sum();
    let cd_total: f64 = rows.iter().map(|r| r.cd_sum).sum();
    let mut counts = Counts::default();
    for r in &rows {
        counts += r.counts;
    }
    let (precision, recall) = precision_recall(&counts);
    let per_kind = PrimitiveKind::ALL
        .iter()
        .map(|k| {
            let n = kind_count[k.index()];
            KindCd {
                kind: format!("{k:?}").to_lowercase(),
                count: n,
                mean_cd: (n > 0).then(|| kind_sum[k.index()] / n as f64),
                absent: n == 0,
            }
        })
        .collect();
    let per_object = |x: f64| if objects == 0 { 0.0 } else { x / objects as f64 };
    EvalReport {
        thresholds: t,
        images: rows.len(),
        objects,
        type_acc: per_object(correct as f64),
        mean_cd: per_object(cd_total),
        precision,
        recall,
        counts,
        per_kind,
        rows,
    }
}
