//! Command-line front end.
//!
//! Settings resolve as: flags, then the `--config` JSON file, then
//! `REGADAPT_SEED` (seed only), then built-in defaults.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use crate::autodiff::checkpoint::config_hash;
use crate::error::Error;
use crate::field::{endpoint_error, DisplacementField};
use crate::metrics::{aggregate_row, evaluate, EvalInputs, LabelInterp, MetricReport, CSV_HEADER};
use crate::pipeline::{
    backbone_predict, gated_preprocess, instance_optimize, iterate_backbone, pretrain_refiners, BackboneSpec, IOConfig, IOInputs,
    PretrainConfig, StyleTransferSpec, TrainPair, VariationalParams,
};
use crate::refine::{init_cascade, RefineCascade, ScaleMode, UpdateMode, Variant};
use crate::synth::{synth_problem, Contrast};
use crate::vol_io::{load_field, load_labels, load_landmarks, load_volume, save_field, save_labels, save_landmarks, save_volume};
use crate::volume::{LabelMap, LandmarkSet, Volume};

pub const SEED_ENV: &str = "REGADAPT_SEED";
pub const CONFIG_VERSION: u32 = 1;

/// Exit status for a run aborted by a non-finite loss or gradient.
pub const EXIT_NUMERICAL: i32 = 2;
/// Exit status for I/O, usage and validation failures.
pub const EXIT_FAILURE: i32 = 1;

#[derive(Parser, Debug)]
#[command(name = "regadapt", version, about = "Deformable registration with gated contrast normalization and cascaded instance optimization")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Register a moving volume to a fixed volume.
    Register(RegisterArgs),
    /// Pretrain the refinement cascade on a pool of pairs.
    Pretrain(PretrainArgs),
    /// Write a synthetic registration problem with known ground truth.
    Synth(SynthArgs),
    /// Score a field against labels and/or landmarks.
    Evaluate(EvaluateArgs),
    /// Compare a backbone-only or iterated-backbone baseline with the full pipeline.
    Baseline(BaselineArgs),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum BackboneKind {
    Zero,
    File,
    Variational,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum StyleKind {
    Identity,
    MonotoneRemap,
    External,
}

/// Every knob shared by `register` and `baseline`.
#[derive(Args, Debug, Clone, Default)]
pub struct PipelineArgs {
    /// JSON run configuration; flags override its values.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Moving (source) volume.
    #[arg(long)]
    pub moving: Option<PathBuf>,
    /// Fixed (target) volume.
    #[arg(long)]
    pub fixed: Option<PathBuf>,
    /// Labels of the moving volume (enables Dice/HD95).
    #[arg(long)]
    pub moving_labels: Option<PathBuf>,
    /// Labels of the fixed volume.
    #[arg(long)]
    pub fixed_labels: Option<PathBuf>,
    /// Landmark CSV `pd,ph,pw,qd,qh,qw` in mm (enables TRE).
    #[arg(long)]
    pub landmarks: Option<PathBuf>,
    /// Initial-field predictor [default: zero].
    #[arg(long, value_enum)]
    pub backbone: Option<BackboneKind>,
    /// Field file read by `--backbone file`.
    #[arg(long)]
    pub backbone_field: Option<PathBuf>,
    /// Contrast normalization used when the gate fires [default: monotone-remap].
    #[arg(long, value_enum)]
    pub style: Option<StyleKind>,
    /// Reference volume for `--style monotone-remap` [default: the fixed volume].
    #[arg(long)]
    pub style_reference: Option<PathBuf>,
    /// One argv element of `--style external`; `{in}` and `{out}` name `.vol` files. Repeat per element.
    #[arg(long = "style-arg", allow_hyphen_values = true)]
    pub style_argv: Vec<String>,
    /// Instance-optimization steps [default: 50].
    #[arg(long)]
    pub steps: Option<usize>,
    /// Adam base learning rate [default: 5e-4].
    #[arg(long)]
    pub lr: Option<f64>,
    /// Linear warmup steps [default: 10].
    #[arg(long)]
    pub warmup: Option<u64>,
    /// Diffusion regularizer weight [default: 0.1].
    #[arg(long)]
    pub lambda: Option<f64>,
    /// LNCC Gaussian window of the loss [default: 9].
    #[arg(long)]
    pub lncc_window: Option<usize>,
    /// LNCC window of the modality gate [default: 11].
    #[arg(long)]
    pub gate_window: Option<usize>,
    /// Gate threshold; style transfer runs when the low-resolution LNCC is below it [default: 0.4].
    #[arg(long, allow_hyphen_values = true)]
    pub tau: Option<f64>,
    /// Average-pooling factor of the gate [default: 4].
    #[arg(long)]
    pub gate_down: Option<usize>,
    /// Residual magnitude scaling [default: 0.05].
    #[arg(long)]
    pub output_scale: Option<f64>,
    /// Which residuals the output scaling applies to [default: finest_residual].
    #[arg(long, value_enum)]
    pub scale_mode: Option<ScaleMode>,
    /// Three-scale cascade or a single full-resolution net [default: cascade].
    #[arg(long, value_enum)]
    pub variant: Option<Variant>,
    /// Compositional or additive field updates [default: compose].
    #[arg(long, value_enum)]
    pub update_mode: Option<UpdateMode>,
    /// U-Net base channel count [default: 32].
    #[arg(long)]
    pub base_channels: Option<usize>,
    /// U-Net depth [default: 3].
    #[arg(long)]
    pub depth: Option<usize>,
    /// Instance normalization inside the U-Nets [default: true].
    #[arg(long)]
    pub instance_norm: Option<bool>,
    /// Record Dice every N steps, 0 disables [default: 5].
    #[arg(long)]
    pub dice_every: Option<usize>,
    /// Label resampling used for Dice/HD95 [default: nearest].
    #[arg(long, value_enum)]
    pub label_interp: Option<LabelInterp>,
    /// Pretrained cascade checkpoint; replaces the seeded initialization.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Random seed [default: $REGADAPT_SEED, else 0].
    #[arg(long)]
    pub seed: Option<u64>,
    /// Write `elapsed_ms` as 0 so traces are byte-reproducible.
    #[arg(long)]
    pub no_timing: bool,
    /// Pair identifier used in reports [default: moving file stem].
    #[arg(long)]
    pub pair: Option<String>,
}

#[derive(Args, Debug)]
pub struct RegisterArgs {
    #[command(flatten)]
    pub pipeline: PipelineArgs,
    /// Output field (`.vol`) [default: field.vol].
    #[arg(long)]
    pub out_field: Option<PathBuf>,
    /// Per-step trace (JSON lines) [default: trace.jsonl].
    #[arg(long)]
    pub trace: Option<PathBuf>,
    /// Run and metric report (JSON) [default: report.json].
    #[arg(long)]
    pub report: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct PretrainArgs {
    #[command(flatten)]
    pub pipeline: PipelineArgs,
    /// Directory of `<name>_moving.vol` / `<name>_fixed.vol` pairs.
    #[arg(long)]
    pub data_dir: Option<PathBuf>,
    /// Generate this many synthetic pairs instead of reading a directory.
    #[arg(long)]
    pub synth_pairs: Option<usize>,
    /// Dims of generated pairs [default: 48 48 48].
    #[arg(long, num_args = 3)]
    pub synth_dims: Option<Vec<usize>>,
    /// Displacement bound of generated pairs, voxels [default: 0.3].
    #[arg(long)]
    pub synth_max_disp: Option<f64>,
    /// Learning rate of pretraining [default: 1e-5].
    #[arg(long = "pretrain-lr")]
    pub pretrain_lr: Option<f64>,
    /// Output checkpoint [default: cascade.ckpt].
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Training-loss log (JSON lines) [default: <out>.log.jsonl].
    #[arg(long)]
    pub log: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct SynthArgs {
    /// Output directory.
    #[arg(long)]
    pub out_dir: PathBuf,
    /// Random seed [default: $REGADAPT_SEED, else 0].
    #[arg(long)]
    pub seed: Option<u64>,
    /// Grid size D H W [default: 48 48 48].
    #[arg(long, num_args = 3, default_values_t = [48, 48, 48])]
    pub dims: Vec<usize>,
    /// Largest displacement component, voxels; must be below 0.4.
    #[arg(long, default_value_t = 0.3)]
    pub max_disp: f64,
    /// Contrast map applied to the phantom.
    #[arg(long, value_enum, default_value_t = Contrast::Identity)]
    pub contrast: Contrast,
}

#[derive(Args, Debug)]
pub struct EvaluateArgs {
    /// Field to score.
    #[arg(long)]
    pub field: Option<PathBuf>,
    #[arg(long)]
    pub moving_labels: Option<PathBuf>,
    #[arg(long)]
    pub fixed_labels: Option<PathBuf>,
    #[arg(long)]
    pub landmarks: Option<PathBuf>,
    /// Pair identifier [default: field file stem].
    #[arg(long)]
    pub pair: Option<String>,
    /// JSON array of `{pair, field, moving_labels?, fixed_labels?, landmarks?}` entries.
    #[arg(long)]
    pub batch: Option<PathBuf>,
    /// Worker threads for batch mode.
    #[arg(long, default_value_t = 1)]
    pub jobs: usize,
    /// Label resampling used for Dice/HD95.
    #[arg(long, value_enum, default_value_t = LabelInterp::Nearest)]
    pub label_interp: LabelInterp,
    /// Report JSON (an array in batch mode) [default: metrics.json].
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// CSV summary [default: metrics.csv].
    #[arg(long)]
    pub csv: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Strategy {
    BackboneOnly,
    Iterate,
}

#[derive(Args, Debug)]
pub struct BaselineArgs {
    #[command(flatten)]
    pub pipeline: PipelineArgs,
    #[arg(long, value_enum)]
    pub strategy: Strategy,
    /// Backbone applications for `--strategy iterate`.
    #[arg(long, default_value_t = 1)]
    pub k: usize,
    /// Ground-truth field for endpoint errors.
    #[arg(long)]
    pub true_field: Option<PathBuf>,
    /// Comparison JSON [default: baseline.json].
    #[arg(long)]
    pub out: Option<PathBuf>,
}

/// Input and output locations of a run.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunPaths {
    pub moving: Option<PathBuf>,
    pub fixed: Option<PathBuf>,
    pub moving_labels: Option<PathBuf>,
    pub fixed_labels: Option<PathBuf>,
    pub landmarks: Option<PathBuf>,
    pub out_field: Option<PathBuf>,
    pub trace: Option<PathBuf>,
    pub report: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
}

/// Everything a run needs; the `--config` file holds (a subset of) this.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub format_version: u32,
    pub io: IOConfig,
    pub backbone: BackboneSpec,
    pub style: StyleTransferSpec,
    pub paths: RunPaths,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            format_version: CONFIG_VERSION,
            io: IOConfig::default(),
            backbone: BackboneSpec::Zero,
            style: StyleTransferSpec::MonotoneRemap,
            paths: RunPaths::default(),
        }
    }
}

impl RunConfig {
    /// Hash of the settings that determine results (paths excluded).
    pub fn hash(&self) -> String {
        config_hash(&serde_json::json!({ "io": self.io, "backbone": self.backbone, "style": self.style }))
    }
}

fn env_seed() -> anyhow::Result<Option<u64>> {
    match std::env::var(SEED_ENV) {
        Ok(s) => Ok(Some(s.trim().parse().with_context(|| format!("{SEED_ENV}={s:?} is not an unsigned integer"))?)),
        Err(_) => Ok(None),
    }
}

fn read_config(path: &Path) -> anyhow::Result<(RunConfig, Option<u64>)> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let value: serde_json::Value = serde_json::from_str(&text).map_err(|e| Error::format(path, e.to_string()))?;
    let seed = value.pointer("/io/seed").and_then(|v| v.as_u64());
    let cfg: RunConfig = serde_json::from_value(value).map_err(|e| Error::format(path, e.to_string()))?;
    if cfg.format_version != CONFIG_VERSION {
        bail!(Error::format(path, format!("unsupported format_version {}", cfg.format_version)));
    }
    Ok((cfg, seed))
}

impl PipelineArgs {
    /// Applies config file, environment and flags on top of the defaults.
    pub fn resolve(&self) -> anyhow::Result<RunConfig> {
        let (mut cfg, file_seed) = match &self.config {
            Some(p) => read_config(p)?,
            None => (RunConfig::default(), None),
        };
        cfg.io.seed = self.seed.or(file_seed).or(env_seed()?).unwrap_or(0);
        let io = &mut cfg.io;
        macro_rules! set {
            ($flag:expr, $slot:expr) => {
                if let Some(v) = $flag.clone() {
                    $slot = v;
                }
            };
        }
        set!(self.steps, io.steps);
        set!(self.lr, io.base_lr);
        set!(self.warmup, io.warmup);
        set!(self.lambda, io.lambda);
        set!(self.lncc_window, io.lncc_window);
        set!(self.gate_window, io.gate.window);
        set!(self.tau, io.gate.tau);
        set!(self.gate_down, io.gate.down);
        set!(self.output_scale, io.cascade.output_scale);
        set!(self.scale_mode, io.cascade.scale_mode);
        set!(self.variant, io.cascade.variant);
        set!(self.update_mode, io.cascade.update_mode);
        set!(self.base_channels, io.cascade.unet.base_channels);
        set!(self.depth, io.cascade.unet.depth);
        set!(self.instance_norm, io.cascade.unet.instance_norm);
        set!(self.dice_every, io.dice_every);
        set!(self.label_interp, io.label_interp);
        if self.no_timing {
            io.timing = false;
        }
        match self.backbone {
            Some(BackboneKind::Zero) => cfg.backbone = BackboneSpec::Zero,
            Some(BackboneKind::Variational) => {
                if !matches!(cfg.backbone, BackboneSpec::Variational(_)) {
                    cfg.backbone = BackboneSpec::Variational(VariationalParams::default());
                }
            }
            Some(BackboneKind::File) => {
                let path = self.backbone_field.clone().context("--backbone file needs --backbone-field")?;
                cfg.backbone = BackboneSpec::File { path };
            }
            None => {
                if let Some(path) = &self.backbone_field {
                    cfg.backbone = BackboneSpec::File { path: path.clone() };
                }
            }
        }
        match self.style {
            Some(StyleKind::Identity) => cfg.style = StyleTransferSpec::Identity,
            Some(StyleKind::MonotoneRemap) => cfg.style = StyleTransferSpec::MonotoneRemap,
            Some(StyleKind::External) => {
                if self.style_argv.is_empty() {
                    bail!(Error::invalid("--style external needs at least one --style-arg"));
                }
                cfg.style = StyleTransferSpec::ExternalCommand { argv: self.style_argv.clone() };
            }
            None => {}
        }
        if let Some(r) = &self.style_reference {
            cfg.style = StyleTransferSpec::MonotoneRemapFile { reference: r.clone() };
        }
        let p = &mut cfg.paths;
        set!(self.moving.clone().map(Some), p.moving);
        set!(self.fixed.clone().map(Some), p.fixed);
        set!(self.moving_labels.clone().map(Some), p.moving_labels);
        set!(self.fixed_labels.clone().map(Some), p.fixed_labels);
        set!(self.landmarks.clone().map(Some), p.landmarks);
        set!(self.checkpoint.clone().map(Some), p.checkpoint);
        cfg.io.validate()?;
        cfg.backbone.validate()?;
        Ok(cfg)
    }
}

fn require<'a>(p: &'a Option<PathBuf>, what: &str) -> anyhow::Result<&'a Path> {
    let path = p.as_deref().with_context(|| format!("missing --{what}"))?;
    if !path.exists() {
        bail!(Error::io(path, std::io::Error::new(std::io::ErrorKind::NotFound, "no such file")));
    }
    Ok(path)
}

fn optional<T>(p: &Option<PathBuf>, load: impl Fn(&Path) -> crate::Result<T>) -> anyhow::Result<Option<T>> {
    Ok(match p {
        Some(path) => Some(load(path)?),
        None => None,
    })
}

fn stem(p: &Path) -> String {
    let name = p.file_name().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    name.strip_suffix(".vol").unwrap_or(&name).to_string()
}

fn write_json(path: &Path, value: &impl Serialize) -> anyhow::Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).map_err(|e| Error::io(path, e))?;
    Ok(())
}

fn ensure_parent(path: &Path) -> anyhow::Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    Ok(())
}

/// Loaded inputs of one pair.
struct PairData {
    moving: Volume<f32>,
    fixed: Volume<f32>,
    labels: Option<(LabelMap, LabelMap)>,
    landmarks: Option<LandmarkSet>,
}

fn load_pair(cfg: &RunConfig) -> anyhow::Result<PairData> {
    let moving = load_volume::<f32>(require(&cfg.paths.moving, "moving")?)?;
    let fixed = load_volume::<f32>(require(&cfg.paths.fixed, "fixed")?)?;
    if moving.dims() != fixed.dims() {
        bail!(Error::shape(format!("moving {:?} vs fixed {:?}", moving.dims(), fixed.dims())));
    }
    let labels = match (&cfg.paths.moving_labels, &cfg.paths.fixed_labels) {
        (Some(a), Some(b)) => Some((load_labels(a)?, load_labels(b)?)),
        (None, None) => None,
        _ => bail!(Error::invalid("--moving-labels and --fixed-labels must be given together")),
    };
    let landmarks = optional(&cfg.paths.landmarks, load_landmarks)?;
    Ok(PairData { moving, fixed, labels, landmarks })
}

fn load_or_init_cascade(cfg: &RunConfig) -> anyhow::Result<RefineCascade<f32>> {
    Ok(match &cfg.paths.checkpoint {
        Some(p) => RefineCascade::load(p)?,
        None => init_cascade(&cfg.io.cascade, cfg.io.seed)?,
    })
}

#[derive(Serialize)]
struct GateSummary {
    fired: bool,
    lncc: f64,
}

#[derive(Serialize)]
struct RunReport {
    pair: String,
    config_hash: String,
    gate: GateSummary,
    steps: usize,
    best_step: usize,
    selection: String,
    final_ndv: f64,
    error: Option<String>,
    metrics: Option<MetricReport>,
}

struct PipelineOutcome {
    phi: DisplacementField<f32>,
    report: RunReport,
}

/// Gate, backbone, instance optimization and metrics for one pair.
fn run_pipeline(cfg: &RunConfig, data: &PairData, pair: &str, trace_out: Option<&Path>) -> anyhow::Result<PipelineOutcome> {
    let pre = gated_preprocess(&data.moving, &data.fixed, &cfg.style, &cfg.io.gate)?;
    let phi0 = backbone_predict(&cfg.backbone, &pre.moving, &pre.fixed)?;
    let mut cascade = load_or_init_cascade(cfg)?;
    let mut writer = match trace_out {
        Some(p) => {
            ensure_parent(p)?;
            Some((BufWriter::new(File::create(p).map_err(|e| Error::io(p, e))?), p))
        }
        None => None,
    };
    let mut write_err: Option<anyhow::Error> = None;
    let inputs = IOInputs {
        moving: &pre.moving,
        fixed: &pre.fixed,
        phi0: &phi0,
        labels: data.labels.as_ref().map(|(a, b)| (a, b)),
    };
    let result = instance_optimize(&inputs, &mut cascade, &cfg.io, |rec| {
        if let Some((w, p)) = writer.as_mut() {
            let line = serde_json::to_string(rec).expect("record serializes");
            if let Err(e) = writeln!(w, "{line}").and_then(|_| w.flush()) {
                write_err.get_or_insert_with(|| Error::io(*p, e).into());
            }
        }
    })?;
    if let Some(e) = write_err {
        return Err(e);
    }
    let mut trace = result.trace;
    trace.gate_fired = pre.fired;
    trace.gate_lncc = Some(pre.gate_lncc);
    let metrics = if data.labels.is_some() || data.landmarks.is_some() {
        Some(evaluate(&EvalInputs {
            pair: pair.to_string(),
            field: &result.phi,
            labels: data.labels.as_ref().map(|(a, b)| (a, b)),
            landmarks: data.landmarks.as_ref(),
            spacing: data.fixed.spacing(),
            interp: cfg.io.label_interp,
        })?)
    } else {
        None
    };
    let report = RunReport {
        pair: pair.to_string(),
        config_hash: cfg.hash(),
        gate: GateSummary { fired: pre.fired, lncc: pre.gate_lncc },
        steps: trace.steps.len(),
        best_step: trace.best_step,
        selection: trace.selection.clone(),
        final_ndv: trace.final_ndv,
        error: trace.error.clone(),
        metrics,
    };
    Ok(PipelineOutcome { phi: result.phi, report })
}

fn pair_name(args: &PipelineArgs, cfg: &RunConfig) -> String {
    args.pair.clone().unwrap_or_else(|| cfg.paths.moving.as_deref().map(stem).unwrap_or_else(|| "pair".into()))
}

fn cmd_register(args: &RegisterArgs) -> anyhow::Result<i32> {
    let mut cfg = args.pipeline.resolve()?;
    cfg.paths.out_field = Some(args.out_field.clone().or(cfg.paths.out_field).unwrap_or_else(|| "field.vol".into()));
    cfg.paths.trace = Some(args.trace.clone().or(cfg.paths.trace).unwrap_or_else(|| "trace.jsonl".into()));
    cfg.paths.report = Some(args.report.clone().or(cfg.paths.report).unwrap_or_else(|| "report.json".into()));
    let data = load_pair(&cfg)?;
    let pair = pair_name(&args.pipeline, &cfg);
    let out = run_pipeline(&cfg, &data, &pair, cfg.paths.trace.as_deref())?;
    let field_path = cfg.paths.out_field.as_deref().expect("set above");
    ensure_parent(field_path)?;
    save_field(&out.phi, field_path)?;
    let report_path = cfg.paths.report.as_deref().expect("set above");
    ensure_parent(report_path)?;
    write_json(report_path, &out.report)?;
    if let Some(e) = &out.report.error {
        eprintln!("regadapt: optimization aborted: {e}");
        return Ok(EXIT_NUMERICAL);
    }
    Ok(0)
}

fn read_pair_dir(dir: &Path) -> anyhow::Result<Vec<(Volume<f32>, Volume<f32>)>> {
    let mut names: Vec<String> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok())
        .filter_map(|e| e.file_name().to_str().and_then(|n| n.strip_suffix("_moving.vol")).map(str::to_string))
        .collect();
    names.sort();
    let mut pairs = Vec::new();
    for n in names {
        let fixed = dir.join(format!("{n}_fixed.vol"));
        if !fixed.exists() {
            continue;
        }
        pairs.push((load_volume(&dir.join(format!("{n}_moving.vol")))?, load_volume(&fixed)?));
    }
    Ok(pairs)
}

fn cmd_pretrain(args: &PretrainArgs) -> anyhow::Result<i32> {
    let cfg = args.pipeline.resolve()?;
    let raw = match (&args.data_dir, args.synth_pairs) {
        (Some(dir), None) => read_pair_dir(dir)?,
        (None, Some(n)) => {
            let dims = args.synth_dims.clone().unwrap_or_else(|| vec![48, 48, 48]);
            let dims = [dims[0], dims[1], dims[2]];
            let max_disp = args.synth_max_disp.unwrap_or(0.3);
            (0..n as u64)
                .map(|i| synth_problem::<f32>(cfg.io.seed.wrapping_add(i), dims, max_disp, Contrast::Identity).map(|p| (p.phantom, p.fixed)))
                .collect::<crate::Result<_>>()?
        }
        _ => bail!(Error::invalid("give exactly one of --data-dir or --synth-pairs")),
    };
    if raw.is_empty() {
        bail!(Error::invalid("the training set is empty"));
    }
    let mut pairs = Vec::with_capacity(raw.len());
    for (moving, fixed) in raw {
        if moving.dims() != fixed.dims() {
            bail!(Error::shape("training pair with mismatched dims"));
        }
        let phi0 = backbone_predict(&cfg.backbone, &moving, &fixed)?;
        pairs.push(TrainPair { moving, fixed, phi0 });
    }
    let pcfg = PretrainConfig {
        steps: args.pipeline.steps.unwrap_or(crate::pipeline::pretrain::DEFAULT_PRETRAIN_STEPS),
        lr: args.pretrain_lr.unwrap_or(crate::pipeline::pretrain::DEFAULT_PRETRAIN_LR),
        lambda: cfg.io.lambda,
        lncc_window: cfg.io.lncc_window,
        seed: cfg.io.seed,
        adam: cfg.io.adam,
    };
    let out = args.out.clone().unwrap_or_else(|| "cascade.ckpt".into());
    ensure_parent(&out)?;
    let log_path = args.log.clone().unwrap_or_else(|| {
        let mut s = out.as_os_str().to_owned();
        s.push(".log.jsonl");
        s.into()
    });
    let mut log = BufWriter::new(File::create(&log_path).map_err(|e| Error::io(&log_path, e))?);
    let mut cascade = load_or_init_cascade(&cfg)?;
    let mut write_err = None;
    pretrain_refiners(&pairs, &mut cascade, &pcfg, |rec| {
        let line = serde_json::to_string(rec).expect("record serializes");
        if let Err(e) = writeln!(log, "{line}") {
            write_err.get_or_insert(e);
        }
    })?;
    if let Some(e) = write_err {
        bail!(Error::io(&log_path, e));
    }
    log.flush().map_err(|e| Error::io(&log_path, e))?;
    cascade.save(&out)?;
    Ok(0)
}

#[derive(Serialize)]
struct SynthManifest {
    seed: u64,
    dims: [usize; 3],
    max_disp: f64,
    contrast: Contrast,
    ndv: f64,
}

fn cmd_synth(args: &SynthArgs) -> anyhow::Result<i32> {
    let seed = args.seed.or(env_seed()?).unwrap_or(0);
    if args.dims.len() != 3 {
        bail!(Error::invalid("--dims takes three values"));
    }
    let dims = [args.dims[0], args.dims[1], args.dims[2]];
    let p = synth_problem::<f32>(seed, dims, args.max_disp, args.contrast)?;
    let dir = &args.out_dir;
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    save_volume(&p.phantom, &dir.join("moving.vol"))?;
    save_volume(&p.fixed, &dir.join("fixed.vol"))?;
    save_volume(&p.remapped, &dir.join("remapped.vol"))?;
    save_labels(&p.labels, &dir.join("moving_labels.vol"))?;
    save_labels(&p.fixed_labels, &dir.join("fixed_labels.vol"))?;
    save_field(&p.true_field, &dir.join("true_field.vol"))?;
    save_landmarks(&p.landmarks, &dir.join("landmarks.csv"))?;
    let ndv = crate::field::ndv(&p.true_field)?;
    write_json(&dir.join("synth.json"), &SynthManifest { seed, dims, max_disp: args.max_disp, contrast: args.contrast, ndv })?;
    Ok(0)
}

#[derive(Clone, Debug, Deserialize)]
struct BatchEntry {
    pair: Option<String>,
    field: PathBuf,
    moving_labels: Option<PathBuf>,
    fixed_labels: Option<PathBuf>,
    landmarks: Option<PathBuf>,
}

fn evaluate_entry(e: &BatchEntry, interp: LabelInterp) -> anyhow::Result<MetricReport> {
    let field = load_field::<f32>(require(&Some(e.field.clone()), "field")?)?;
    let labels = match (&e.moving_labels, &e.fixed_labels) {
        (Some(a), Some(b)) => Some((load_labels(a)?, load_labels(b)?)),
        (None, None) => None,
        _ => bail!(Error::invalid("moving and fixed labels must be given together")),
    };
    let landmarks = optional(&e.landmarks, load_landmarks)?;
    if labels.is_none() && landmarks.is_none() {
        bail!(Error::invalid("evaluation needs labels and/or landmarks"));
    }
    let spacing = labels.as_ref().map(|(_, b)| b.spacing()).unwrap_or(field.spacing());
    Ok(evaluate(&EvalInputs {
        pair: e.pair.clone().unwrap_or_else(|| stem(&e.field)),
        field: &field,
        labels: labels.as_ref().map(|(a, b)| (a, b)),
        landmarks: landmarks.as_ref(),
        spacing,
        interp,
    })?)
}

fn cmd_evaluate(args: &EvaluateArgs) -> anyhow::Result<i32> {
    let entries: Vec<BatchEntry> = match (&args.batch, &args.field) {
        (Some(b), None) => {
            let text = fs::read_to_string(b).map_err(|e| Error::io(b, e))?;
            serde_json::from_str(&text).map_err(|e| Error::format(b, e.to_string()))?
        }
        (None, Some(f)) => vec![BatchEntry {
            pair: args.pair.clone(),
            field: f.clone(),
            moving_labels: args.moving_labels.clone(),
            fixed_labels: args.fixed_labels.clone(),
            landmarks: args.landmarks.clone(),
        }],
        _ => bail!(Error::invalid("give exactly one of --field or --batch")),
    };
    if entries.is_empty() {
        bail!(Error::invalid("the batch is empty"));
    }
    let jobs = args.jobs.max(1).min(entries.len());
    let mut results: Vec<Option<anyhow::Result<MetricReport>>> = (0..entries.len()).map(|_| None).collect();
    std::thread::scope(|s| {
        let chunk = entries.len().div_ceil(jobs);
        for (es, rs) in entries.chunks(chunk).zip(results.chunks_mut(chunk)) {
            s.spawn(move || {
                for (e, r) in es.iter().zip(rs) {
                    *r = Some(evaluate_entry(e, args.label_interp));
                }
            });
        }
    });
    let reports: Vec<MetricReport> = results.into_iter().map(|r| r.expect("every entry evaluated")).collect::<anyhow::Result<_>>()?;
    let out = args.out.clone().unwrap_or_else(|| "metrics.json".into());
    ensure_parent(&out)?;
    if args.batch.is_some() {
        write_json(&out, &reports)?;
    } else {
        write_json(&out, &reports[0])?;
    }
    let csv = args.csv.clone().unwrap_or_else(|| "metrics.csv".into());
    ensure_parent(&csv)?;
    let mut text = format!("{CSV_HEADER}\n");
    for r in &reports {
        text.push_str(&r.csv_row());
        text.push('\n');
    }
    if args.batch.is_some() {
        text.push_str(&aggregate_row(&reports));
        text.push('\n');
    }
    fs::write(&csv, text).map_err(|e| Error::io(&csv, e))?;
    Ok(0)
}

#[derive(Serialize)]
struct Arm {
    name: String,
    endpoint_error: Option<f64>,
    ndv: f64,
    metrics: Option<MetricReport>,
}

#[derive(Serialize)]
struct Comparison {
    pair: String,
    strategy: String,
    k: usize,
    baseline: Arm,
    pipeline: Arm,
    pipeline_error: Option<String>,
}

fn cmd_baseline(args: &BaselineArgs) -> anyhow::Result<i32> {
    let cfg = args.pipeline.resolve()?;
    let data = load_pair(&cfg)?;
    let pair = pair_name(&args.pipeline, &cfg);
    let truth = optional(&args.true_field, load_field::<f32>)?;
    let k = match args.strategy {
        Strategy::BackboneOnly => 1,
        Strategy::Iterate => args.k,
    };
    let pre = gated_preprocess(&data.moving, &data.fixed, &cfg.style, &cfg.io.gate)?;
    let base_phi = iterate_backbone(&cfg.backbone, &pre.moving, &pre.fixed, k)?;
    let arm = |name: &str, phi: &DisplacementField<f32>| -> anyhow::Result<Arm> {
        let endpoint_error = truth.as_ref().map(|t| endpoint_error(phi, t)).transpose()?;
        let metrics = if data.labels.is_some() || data.landmarks.is_some() {
            Some(evaluate(&EvalInputs {
                pair: pair.clone(),
                field: phi,
                labels: data.labels.as_ref().map(|(a, b)| (a, b)),
                landmarks: data.landmarks.as_ref(),
                spacing: data.fixed.spacing(),
                interp: cfg.io.label_interp,
            })?)
        } else {
            None
        };
        Ok(Arm { name: name.into(), endpoint_error, ndv: crate::field::ndv(phi)?, metrics })
    };
    let baseline = arm(if k == 1 { "backbone-only" } else { "iterate" }, &base_phi)?;
    let full = run_pipeline(&cfg, &data, &pair, None)?;
    let comparison = Comparison {
        pair: pair.clone(),
        strategy: format!("{:?}", args.strategy).to_lowercase(),
        k,
        baseline,
        pipeline: arm("pipeline", &full.phi)?,
        pipeline_error: full.report.error.clone(),
    };
    let out = args.out.clone().unwrap_or_else(|| "baseline.json".into());
    ensure_parent(&out)?;
    write_json(&out, &comparison)?;
    Ok(if comparison.pipeline_error.is_some() { EXIT_NUMERICAL } else { 0 })
}

/// Maps an error chain to the documented exit status.
pub fn exit_code(err: &anyhow::Error) -> i32 {
    match err.downcast_ref::<Error>() {
        Some(e) if e.is_numerical() => EXIT_NUMERICAL,
        _ => EXIT_FAILURE,
    }
}

/// Parses `args` (including the program name) and runs the command.
pub fn run<I, S>(args: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_FAILURE } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    let result = match &cli.command {
        Command::Register(a) => cmd_register(a),
        Command::Pretrain(a) => cmd_pretrain(a),
        Command::Synth(a) => cmd_synth(a),
        Command::Evaluate(a) => cmd_evaluate(a),
        Command::Baseline(a) => cmd_baseline(a),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("regadapt: {e:#}");
            exit_code(&e)
        }
    }
}
