use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{ArgGroup, Args, Parser, Subcommand, ValueEnum};
use primsketch::dataset::{generate_corpus, load_corpus, write_corpus, CorpusSplit, Sketch};
use primsketch::denoise::DenoiseConfig;
use primsketch::export::{export, ExportFormat, DEFAULT_SCALE};
use primsketch::geometry::Primitive;
use primsketch::handdraw::{read_render_dir, render_precise, render_samples, write_render_dir, NoiseConfig, RasterImage};
use primsketch::metrics::{evaluate, EvalReport, EvalSample, EvalThresholds, OraclePredictor, Predictor};
use primsketch::model::CHECKPOINT_VERSION;
use primsketch::pipeline::{eval_samples, infer, load_checkpoint, prepare_items, train, Regimen, TrainConfig, TrainItem, TrainOutputs};
use primsketch::seeds::mix_seed;
use serde::Serialize;

use crate::server::{self, checkpoint_version, InferResponse, ModelInfo, PrimitiveOut, ServeConfig};

#[derive(Debug, Parser)]
#[command(name = "primsketch", version, about = "Recover parametric sketch primitives from raster images")]
pub struct Cli {
    /// Seed for every random choice; overrides the seed of a config file.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic sketch corpus.
    GenData(GenDataArgs),
    /// Render a corpus to PNG images.
    Render(RenderArgs),
    /// Train a model.
    Train(TrainArgs),
    /// Evaluate a checkpoint, or the ground-truth oracle, on a corpus.
    Eval(EvalArgs),
    /// Train and evaluate a sweep of denoising variants.
    Ablate(AblateArgs),
    /// Detect primitives in one image.
    Infer(InferArgs),
    /// Convert primitive JSON to DXF, SVG or JSON.
    Export(ExportArgs),
    /// Run the HTTP service.
    Serve(ServeArgs),
}

#[derive(Debug, Args)]
pub struct GenDataArgs {
    #[arg(long)]
    pub count: usize,
    /// Output directory; the corpus is written to `corpus.json` inside it.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum RenderMode {
    Precise,
    Hand,
}

#[derive(Debug, Args)]
pub struct RenderArgs {
    #[arg(long)]
    pub corpus: PathBuf,
    #[arg(long, value_enum, default_value = "precise")]
    pub mode: RenderMode,
    /// Hand-drawn samples per sketch.
    #[arg(long, default_value_t = 5)]
    pub samples: usize,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SplitArg {
    Train,
    Val,
    Test,
    All,
}

/// Corpus selection shared by train, eval and ablate.
#[derive(Debug, Args)]
pub struct DataArgs {
    #[arg(long)]
    pub corpus: PathBuf,
    /// Directory written by `render`; images are rendered in memory when absent.
    #[arg(long)]
    pub renders: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum Preset {
    Desk,
    Smoke,
    Paper,
}

#[derive(Debug, Args)]
pub struct TrainOverrides {
    /// JSON training config; missing fields take desk defaults.
    #[arg(long, conflicts_with = "preset")]
    pub config: Option<PathBuf>,
    #[arg(long, value_enum)]
    pub preset: Option<Preset>,
    #[arg(long)]
    pub regimen: Option<Regimen>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub max_steps: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub val_every: Option<usize>,
    /// Train and validate on the whole corpus instead of its train/val split.
    #[arg(long)]
    pub overfit: bool,
}

impl TrainOverrides {
    pub fn resolve(&self, seed: Option<u64>) -> Result<TrainConfig> {
        let mut cfg = match (&self.config, self.preset) {
            (Some(path), _) => {
                let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
                serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?
            }
            (None, Some(Preset::Smoke)) => TrainConfig::smoke(),
            (None, Some(Preset::Paper)) => TrainConfig::paper(self.regimen.unwrap_or(Regimen::HanddrawnAffine)),
            (None, Some(Preset::Desk) | None) => TrainConfig::desk(self.regimen.unwrap_or(Regimen::HanddrawnAffine)),
        };
        if let Some(r) = self.regimen {
            cfg.regimen = r;
        }
        if let Some(e) = self.epochs {
            cfg.epochs = e;
        }
        if self.max_steps.is_some() {
            cfg.max_steps = self.max_steps;
        }
        if let Some(b) = self.batch_size {
            cfg.batch_size = b;
        }
        if let Some(lr) = self.lr {
            cfg.schedule.peak_lr = lr;
        }
        if let Some(v) = self.val_every {
            cfg.val_every = v;
        }
        if let Some(s) = seed {
            cfg.seed = s;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[command(flatten)]
    pub overrides: TrainOverrides,
    /// Number of denoising groups; 0 disables denoising.
    #[arg(long)]
    pub groups: Option<usize>,
    /// Receives model.ckpt, best.ckpt, history.jsonl and config.json.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
#[command(group(ArgGroup::new("predictor").required(true).args(["checkpoint", "oracle"])))]
pub struct EvalArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Score ground truth as predictions.
    #[arg(long)]
    pub oracle: bool,
    #[arg(long, value_enum, default_value = "all")]
    pub split: SplitArg,
    /// Regimen used to render images when `--renders` is absent.
    #[arg(long, default_value = "precise")]
    pub regimen: Regimen,
    #[arg(long, default_value_t = 0.5)]
    pub conf_threshold: f64,
    #[arg(long, default_value_t = 0.4)]
    pub cd_threshold: f64,
    /// Report path; stdout when absent.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Per-image rows as CSV.
    #[arg(long)]
    pub csv: Option<PathBuf>,
}

#[derive(Debug, Args)]
#[command(group(ArgGroup::new("sweep").required(true).args(["groups_sweep", "components", "mask"])))]
pub struct AblateArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[command(flatten)]
    pub overrides: TrainOverrides,
    /// Group counts to compare, e.g. `0,1,3`.
    #[arg(long = "groups", value_delimiter = ',')]
    pub groups_sweep: Vec<usize>,
    /// Single-group runs toggling parameter noise, label noise and the attention mask.
    #[arg(long)]
    pub components: bool,
    /// Attention mask on versus off at the configured group count.
    #[arg(long)]
    pub mask: bool,
    /// JSON file keyed by variant; stdout when absent.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct InferArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// 128×128 grayscale PNG.
    #[arg(long)]
    pub image: PathBuf,
    #[arg(long, default_value_t = server::DEFAULT_THRESHOLD)]
    pub threshold: f64,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ExportArgs {
    /// JSON array of primitives, or an object with a `primitives` array.
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long, default_value = "dxf")]
    pub format: ExportFormat,
    /// Output units per normalized unit.
    #[arg(long, default_value_t = DEFAULT_SCALE)]
    pub scale: f64,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long, default_value = "127.0.0.1:8080")]
    pub addr: std::net::SocketAddr,
    /// Directory served under `/`.
    #[arg(long = "static")]
    pub static_dir: Option<PathBuf>,
}

pub fn run(cli: Cli) -> Result<()> {
    let seed = cli.seed;
    match cli.command {
        Command::GenData(a) => gen_data(&a, seed.unwrap_or(0)),
        Command::Render(a) => render(&a, seed.unwrap_or(0)),
        Command::Train(a) => train_cmd(&a, seed),
        Command::Eval(a) => eval_cmd(&a, seed.unwrap_or(0)),
        Command::Ablate(a) => ablate(&a, seed),
        Command::Infer(a) => infer_cmd(&a),
        Command::Export(a) => export_cmd(&a),
        Command::Serve(a) => tokio::runtime::Runtime::new()?.block_on(server::serve(ServeConfig {
            checkpoint: a.checkpoint,
            addr: a.addr,
            static_dir: a.static_dir,
        })),
    }
}

fn write_output(out: Option<&Path>, bytes: &[u8]) -> Result<()> {
    match out {
        Some(p) => std::fs::write(p, bytes).with_context(|| format!("writing {}", p.display())),
        None => {
            use std::io::Write;
            let mut stdout = std::io::stdout().lock();
            stdout.write_all(bytes)?;
            Ok(stdout.flush()?)
        }
    }
}

fn gen_data(a: &GenDataArgs, seed: u64) -> Result<()> {
    std::fs::create_dir_all(&a.out)?;
    let path = a.out.join("corpus.json");
    write_corpus(&path, &generate_corpus(a.count, seed))?;
    eprintln!("wrote {} sketches to {}", a.count, path.display());
    Ok(())
}

fn load_sketches(path: &Path) -> Result<Vec<Sketch>> {
    let corpus = load_corpus(path).with_context(|| format!("loading {}", path.display()))?;
    if corpus.skipped > 0 {
        log::warn!("skipped {} invalid records in {}", corpus.skipped, path.display());
    }
    Ok(corpus.sketches)
}

fn render(a: &RenderArgs, seed: u64) -> Result<()> {
    let noise = NoiseConfig { samples_per_sketch: a.samples, ..NoiseConfig::default() };
    noise.validate()?;
    let sketches = load_sketches(&a.corpus)?;
    for (i, s) in sketches.iter().enumerate() {
        let renders = match a.mode {
            RenderMode::Precise => vec![render_precise(s)],
            RenderMode::Hand => render_samples(s, &noise, mix_seed(seed, i as u64))?,
        };
        write_render_dir(&a.out, s, &renders)?;
    }
    eprintln!("rendered {} sketches to {}", sketches.len(), a.out.display());
    Ok(())
}

/// Renders from disk when a render directory is given, otherwise in memory.
fn items_for(sketches: &[Sketch], data: &DataArgs, regimen: Regimen, noise: &NoiseConfig, seed: u64) -> Result<Vec<TrainItem>> {
    match &data.renders {
        Some(dir) => sketches
            .iter()
            .map(|s| Ok(TrainItem { sketch: s.clone(), renders: read_render_dir(dir, &s.id)? }))
            .collect(),
        None => Ok(prepare_items(sketches, regimen, noise, seed)?),
    }
}

fn select(sketches: &[Sketch], split: SplitArg, seed: u64) -> Vec<Sketch> {
    let parts = CorpusSplit::default().partition(sketches, seed);
    let pick = |v: &Vec<&Sketch>| v.iter().map(|&s| s.clone()).collect();
    match split {
        SplitArg::Train => pick(&parts[0]),
        SplitArg::Val => pick(&parts[1]),
        SplitArg::Test => pick(&parts[2]),
        SplitArg::All => sketches.to_vec(),
    }
}

/// Training items and validation samples for a config. With `overfit` both
/// come from the whole corpus.
fn train_data(sketches: &[Sketch], data: &DataArgs, cfg: &TrainConfig, overfit: bool) -> Result<(Vec<TrainItem>, Vec<EvalSample>)> {
    if overfit {
        let items = items_for(sketches, data, cfg.regimen, &cfg.noise, cfg.seed)?;
        let val = eval_samples(&items);
        return Ok((items, val));
    }
    let train_set = select(sketches, SplitArg::Train, cfg.seed);
    let val_set = select(sketches, SplitArg::Val, cfg.seed);
    if train_set.is_empty() {
        bail!("the train split of {} sketches is empty; use --overfit for tiny corpora", sketches.len());
    }
    let items = items_for(&train_set, data, cfg.regimen, &cfg.noise, cfg.seed)?;
    let val = eval_samples(&items_for(&val_set, data, cfg.regimen, &cfg.noise, mix_seed(cfg.seed, 1))?);
    Ok((items, val))
}

fn train_cmd(a: &TrainArgs, seed: Option<u64>) -> Result<()> {
    let mut cfg = a.overrides.resolve(seed)?;
    if let Some(g) = a.groups {
        cfg.denoise.groups = g;
        cfg.validate()?;
    }
    let sketches = load_sketches(&a.data.corpus)?;
    let (items, val) = train_data(&sketches, &a.data, &cfg, a.overrides.overfit)?;
    std::fs::create_dir_all(&a.out)?;
    std::fs::write(a.out.join("config.json"), serde_json::to_string_pretty(&cfg)? + "\n")?;
    let outputs = TrainOutputs { history: Some(a.out.join("history.jsonl")), best_checkpoint: Some(a.out.join("best.ckpt")) };
    let outcome = train(&cfg, &items, &val, &outputs)?;
    outcome.model.save(&a.out.join("model.ckpt"))?;
    eprintln!(
        "trained {} steps on {} sketches; best validation mean CD {}",
        outcome.steps_run,
        items.len(),
        outcome.best_mean_cd.map_or("n/a".to_string(), |c| format!("{c:.5}"))
    );
    Ok(())
}

fn eval_cmd(a: &EvalArgs, seed: u64) -> Result<()> {
    let sketches = select(&load_sketches(&a.data.corpus)?, a.split, seed);
    let items = items_for(&sketches, &a.data, a.regimen, &NoiseConfig::default(), seed)?;
    let samples = eval_samples(&items);
    let thresholds = EvalThresholds { tau_con: a.conf_threshold, tau_cd: a.cd_threshold };
    let report = match &a.checkpoint {
        Some(path) => evaluate(&load_checkpoint(path, None)?, &samples, &thresholds)?,
        None => {
            let oracle = OraclePredictor { n_queries: primsketch::model::ModelConfig::tiny().n_queries };
            evaluate(&oracle as &dyn Predictor, &samples, &thresholds)?
        }
    };
    write_output(a.out.as_deref(), (report.to_json() + "\n").as_bytes())?;
    if let Some(csv) = &a.csv {
        std::fs::write(csv, report.to_csv())?;
    }
    Ok(())
}

#[derive(Serialize)]
struct AblationOutput {
    sweep: &'static str,
    reports: BTreeMap<String, EvalReport>,
}

/// Variants as (key, denoise config) pairs.
fn sweep_variants(a: &AblateArgs, base: &DenoiseConfig) -> (&'static str, Vec<(String, DenoiseConfig)>) {
    if !a.groups_sweep.is_empty() {
        let v = a.groups_sweep.iter().map(|&g| (g.to_string(), DenoiseConfig { groups: g, ..*base })).collect();
        return ("groups", v);
    }
    if a.components {
        let one = DenoiseConfig { groups: 1, ..*base };
        let row = |param: bool, label: bool, mask: bool| {
            let mut key: Vec<&str> = Vec::new();
            if param {
                key.push("param");
            }
            if label {
                key.push("label");
            }
            if mask {
                key.push("mask");
            }
            (key.join("+"), DenoiseConfig { param_noise: param, label_noise: label, use_mask: mask, ..one })
        };
        return ("components", vec![row(true, true, true), row(true, false, true), row(false, false, true), row(true, true, false)]);
    }
    ("mask", vec![("mask".into(), DenoiseConfig { use_mask: true, ..*base }), ("no-mask".into(), DenoiseConfig { use_mask: false, ..*base })])
}

fn ablate(a: &AblateArgs, seed: Option<u64>) -> Result<()> {
    let base = a.overrides.resolve(seed)?;
    let sketches = load_sketches(&a.data.corpus)?;
    let (items, val) = train_data(&sketches, &a.data, &base, a.overrides.overfit)?;
    let test = if a.overrides.overfit {
        val.clone()
    } else {
        let test_set = select(&sketches, SplitArg::Test, base.seed);
        eval_samples(&items_for(&test_set, &a.data, base.regimen, &base.noise, mix_seed(base.seed, 2))?)
    };
    if test.is_empty() {
        bail!("the test split is empty; use a larger corpus or --overfit");
    }
    let (sweep, variants) = sweep_variants(a, &base.denoise);
    let mut reports = BTreeMap::new();
    for (key, denoise) in variants {
        let cfg = TrainConfig { denoise, ..base.clone() };
        cfg.validate()?;
        let outcome = train(&cfg, &items, &val, &TrainOutputs::default())?;
        let report = evaluate(&outcome.model, &test, &EvalThresholds::default())?;
        eprintln!(
            "{key:>16}  type_acc {:.4}  mean_cd {:.5}  precision {:.4}  recall {:.4}",
            report.type_acc, report.mean_cd, report.precision, report.recall
        );
        reports.insert(key, report);
    }
    let json = serde_json::to_string_pretty(&AblationOutput { sweep, reports })? + "\n";
    write_output(a.out.as_deref(), json.as_bytes())
}

fn infer_cmd(a: &InferArgs) -> Result<()> {
    let bytes = std::fs::read(&a.checkpoint).with_context(|| format!("reading {}", a.checkpoint.display()))?;
    let model = primsketch::Model32::from_bytes(&bytes, None)?;
    let image = RasterImage::from_png(&std::fs::read(&a.image).with_context(|| format!("reading {}", a.image.display()))?)?;
    let response = InferResponse {
        primitives: infer(&model, &image, a.threshold)?
            .into_iter()
            .map(|d| PrimitiveOut { kind: d.primitive.kind, params: d.primitive.params, confidence: d.confidence })
            .collect(),
        model: ModelInfo { version: checkpoint_version(&bytes), checkpoint_format: CHECKPOINT_VERSION },
    };
    write_output(a.out.as_deref(), (serde_json::to_string_pretty(&response)? + "\n").as_bytes())
}

#[derive(serde::Deserialize)]
#[serde(untagged)]
enum PrimitiveFile {
    List(Vec<Primitive>),
    Wrapped { primitives: Vec<Primitive> },
}

/// Reads primitives and checks the normalized-range invariant.
pub fn read_primitives(text: &str) -> Result<Vec<Primitive>> {
    let prims = match serde_json::from_str(text)? {
        PrimitiveFile::List(p) | PrimitiveFile::Wrapped { primitives: p } => p,
    };
    prims
        .into_iter()
        .enumerate()
        .map(|(i, p)| Primitive::new(p.kind, p.params).with_context(|| format!("primitive {i}")))
        .collect()
}

fn export_cmd(a: &ExportArgs) -> Result<()> {
    let text = std::fs::read_to_string(&a.input).with_context(|| format!("reading {}", a.input.display()))?;
    let prims = read_primitives(&text)?;
    write_output(a.out.as_deref(), &export(&prims, a.format, a.scale)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use clap::CommandFactory;

    #[test]
    fn cli_definition_is_consistent() {
        Cli::command().debug_assert();
    }

    #[test]
    fn overrides_apply_on_top_of_preset() {
        let cli = Cli::parse_from(["primsketch", "--seed", "9", "train", "--corpus", "c.json", "--out", "o", "--preset", "smoke", "--lr", "0.01"]);
        let Command::Train(a) = cli.command else { panic!("expected train") };
        let cfg = a.overrides.resolve(cli.seed).unwrap();
        assert_eq!(cfg.seed, 9);
        assert_eq!(cfg.schedule.peak_lr, 0.01);
        assert_eq!(cfg.max_steps, TrainConfig::smoke().max_steps);
    }

    #[test]
    fn component_sweep_mirrors_single_group_rows() {
        let cli = Cli::parse_from(["primsketch", "ablate", "--corpus", "c.json", "--components"]);
        let Command::Ablate(a) = cli.command else { panic!("expected ablate") };
        let (name, v) = sweep_variants(&a, &DenoiseConfig::default());
        assert_eq!(name, "components");
        let keys: Vec<&str> = v.iter().map(|(k, _)| k.as_str()).collect();
        assert_eq!(keys, ["param+label+mask", "param+mask", "mask", "param+label"]);
        assert!(v.iter().all(|(_, d)| d.groups == 1));
        assert!(!v[3].1.use_mask && !v[2].1.param_noise && !v[1].1.label_noise);
    }

    #[test]
    fn primitives_read_bare_or_wrapped() {
        let bare = r#"[{"kind":"line","params":[0,0,1,1,0,0]}]"#;
        let wrapped = r#"{"primitives":[{"kind":"point","params":[0.5,0.5,0,0,0,0],"confidence":0.9}]}"#;
        assert_eq!(read_primitives(bare).unwrap().len(), 1);
        assert_eq!(read_primitives(wrapped).unwrap()[0].params[0], 0.5);
        assert!(read_primitives(r#"[{"kind":"line","params":[0,0,2,1,0,0]}]"#).is_err());
    }
}
