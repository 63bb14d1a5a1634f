//! Command-line front end. Every subcommand reads an optional TOML config
//! (`--config`); flags given on the command line win over the file, and the
//! file wins over built-in defaults.
//!
//! Exit codes: 0 success, 1 configuration error, 2 data error, 3 training
//! failure.

use std::ffi::OsString;
use std::fs::{self, File};
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::Deserialize;

use crate::bounds::{bounds_grid, write_bounds_csv, BoundInputs};
use crate::datagen::{export_instance_csv, generate_with_held_out, load_dataset, save_dataset, SynthConfig};
use crate::dataset::{prior_from_ratios, Dataset, ImbalanceSpec, PriorLevel};
use crate::error::{Error, Result};
use crate::eval::{evaluate, metrics, predict_dataset, run_sweep, MacroPrediction, SweepGrid};
use crate::model::{DEFAULT_HIDDEN, DEFAULT_LR};
use crate::train::{train, Method, TrainConfig, TrainedModel};

pub const EXIT_OK: i32 = 0;
pub const EXIT_CONFIG: i32 = 1;
pub const EXIT_DATA: i32 = 2;
pub const EXIT_TRAINING: i32 = 3;

/// Exit code for an error.
pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::InvalidConfig(_) => EXIT_CONFIG,
        Error::TrainingFailure { .. } | Error::Numeric { .. } => EXIT_TRAINING,
        _ => EXIT_DATA,
    }
}

#[derive(Debug, Parser)]
#[command(name = "bfgpu", version, about = "Balanced fine-grained PU learning for multi-instance anomaly detection")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic bag dataset as JSON lines.
    Synth(SynthArgs),
    /// Train a model and write a JSON checkpoint.
    Train(TrainArgs),
    /// Score a dataset with a trained checkpoint.
    Eval(EvalArgs),
    /// Train and evaluate every cell of a σ grid.
    Sweep(SweepArgs),
    /// Tabulate the generalization bounds over a σ grid.
    Bounds(BoundsArgs),
}

/// Declarative run configuration. Each section feeds one subcommand.
#[derive(Debug, Clone, Default, PartialEq, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub synth: SynthSection,
    pub train: TrainSection,
    pub eval: EvalSection,
    pub sweep: SweepGrid,
    pub bounds: BoundsSection,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        Self::parse(&text)
    }

    pub fn parse(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::invalid_config(format!("config file: {e}")))
    }
}

#[derive(Debug, Clone, Default, PartialEq, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthSection {
    pub sigma_micro: Option<u32>,
    pub sigma_macro: Option<f64>,
    pub neg_bags: Option<usize>,
    pub seed: Option<u64>,
    pub dim: Option<usize>,
    pub separation: Option<f64>,
    pub noise: Option<f64>,
    pub pool_size: Option<usize>,
    pub out: Option<PathBuf>,
    pub held_out: Option<PathBuf>,
    pub csv: Option<PathBuf>,
}

#[derive(Debug, Clone, Default, PartialEq, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub method: Option<Method>,
    pub data: Option<PathBuf>,
    pub held_out: Option<PathBuf>,
    pub seed: Option<u64>,
    pub prior: Option<f64>,
    pub prior_level: Option<PriorLevel>,
    pub lr: Option<f64>,
    pub epochs: Option<usize>,
    pub batch_bags: Option<usize>,
    pub lambda_bfgpu: Option<f64>,
    pub lambda_pse: Option<f64>,
    pub topk: Option<usize>,
    pub hidden: Option<usize>,
    pub adt: Option<bool>,
    pub out: Option<PathBuf>,
    pub curve: Option<PathBuf>,
    pub report: Option<PathBuf>,
}

#[derive(Debug, Clone, Default, PartialEq, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    pub model: Option<PathBuf>,
    pub data: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub predictions: Option<PathBuf>,
}

#[derive(Debug, Clone, Default, PartialEq, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BoundsSection {
    pub c_g: Option<f64>,
    pub alpha_l: Option<f64>,
    pub delta: Option<f64>,
    pub n_p: Option<f64>,
    pub n_u: Option<f64>,
    pub disc: Option<f64>,
    pub p_inc: Option<f64>,
    pub sigma_micro: Option<Vec<f64>>,
    pub sigma_macro: Option<Vec<f64>>,
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
#[command(allow_negative_numbers = true)]
pub struct SynthArgs {
    /// TOML config file; its [synth] table supplies defaults for these flags.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Normal instances per anomaly inside an anomalous bag [default: 5]
    #[arg(long)]
    pub sigma_micro: Option<u32>,
    /// Normal bags per anomalous bag [default: 1]
    #[arg(long)]
    pub sigma_macro: Option<f64>,
    /// Number of anomalous bags [default: 50]
    #[arg(long)]
    pub neg_bags: Option<usize>,
    /// Random seed [default: 0]
    #[arg(long)]
    pub seed: Option<u64>,
    /// Feature dimension [default: 2]
    #[arg(long)]
    pub dim: Option<usize>,
    /// Distance between the two class means [default: 6]
    #[arg(long)]
    pub separation: Option<f64>,
    /// Per-coordinate noise standard deviation [default: 0.5]
    #[arg(long)]
    pub noise: Option<f64>,
    /// Points drawn per class for the base pool [default: 1000]
    #[arg(long)]
    pub pool_size: Option<usize>,
    /// Output JSON-lines file [required]
    #[arg(short, long)]
    pub out: Option<PathBuf>,
    /// Also write an independent held-out draw here [default: none]
    #[arg(long)]
    pub held_out: Option<PathBuf>,
    /// Also write a flat per-instance CSV here [default: none]
    #[arg(long)]
    pub csv: Option<PathBuf>,
}

#[derive(Debug, Args)]
#[command(allow_negative_numbers = true)]
pub struct TrainArgs {
    /// TOML config file; its [train] table supplies defaults for these flags.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// bfgpu, upu, nnpu, balancedpu, mil_max, mil_topk, mil_attention,
    /// macro_supervised, macro_under or macro_over [default: bfgpu]
    #[arg(long)]
    pub method: Option<String>,
    /// Training dataset (JSON lines) [required]
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Held-out dataset to report metrics on [default: none]
    #[arg(long)]
    pub held_out: Option<PathBuf>,
    /// Random seed [default: 0]
    #[arg(long)]
    pub seed: Option<u64>,
    /// Class prior π; overrides --prior-level [default: estimated from the data]
    #[arg(long)]
    pub prior: Option<f64>,
    /// Prior formula when estimating from data: micro or dual [default: micro]
    #[arg(long)]
    pub prior_level: Option<String>,
    /// Base learning rate; 1e-3 works well for the small default network [default: 1e-5]
    #[arg(long)]
    pub lr: Option<f64>,
    /// Training epochs [default: 5]
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Bags per class in each batch [default: 16]
    #[arg(long)]
    pub batch_bags: Option<usize>,
    /// Weight of the attention-weighted PU risk [default: 1/π]
    #[arg(long)]
    pub lambda_bfgpu: Option<f64>,
    /// Weight of the pseudo-label loss [default: 1]
    #[arg(long)]
    pub lambda_pse: Option<f64>,
    /// k for mil_topk [default: 3]
    #[arg(long)]
    pub topk: Option<usize>,
    /// Hidden units; 0 gives a linear model [default: 32]
    #[arg(long)]
    pub hidden: Option<usize>,
    /// Calibrate the threshold from the prior [default: true for bfgpu, false otherwise]
    #[arg(long)]
    pub adt: Option<bool>,
    /// Checkpoint JSON path [required]
    #[arg(short, long)]
    pub out: Option<PathBuf>,
    /// Training-curve CSV path [default: none]
    #[arg(long)]
    pub curve: Option<PathBuf>,
    /// Held-out metric report JSON path [default: stdout]
    #[arg(long)]
    pub report: Option<PathBuf>,
}

#[derive(Debug, Args)]
#[command(allow_negative_numbers = true)]
pub struct EvalArgs {
    /// TOML config file; its [eval] table supplies defaults for these flags.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Checkpoint JSON written by `train` [required]
    #[arg(long)]
    pub model: Option<PathBuf>,
    /// Labelled dataset (JSON lines) [required]
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Metric report JSON path [default: stdout]
    #[arg(short, long)]
    pub out: Option<PathBuf>,
    /// Per-bag prediction CSV path [default: none]
    #[arg(long)]
    pub predictions: Option<PathBuf>,
}

#[derive(Debug, Args)]
#[command(allow_negative_numbers = true)]
pub struct SweepArgs {
    /// TOML config file; its [sweep] table supplies the grid.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Comma-separated methods [default: bfgpu,mil_max]
    #[arg(long, value_delimiter = ',')]
    pub methods: Option<Vec<String>>,
    /// Comma-separated σ_micro values [default: 2,4,6,8,10]
    #[arg(long, value_delimiter = ',')]
    pub sigma_micro: Option<Vec<u32>>,
    /// Comma-separated σ_macro values [default: 1]
    #[arg(long, value_delimiter = ',')]
    pub sigma_macro: Option<Vec<f64>>,
    /// Comma-separated seeds [default: 0,1,2]
    #[arg(long, value_delimiter = ',')]
    pub seeds: Option<Vec<u64>>,
    /// Anomalous bags per draw [default: 50]
    #[arg(long)]
    pub neg_bags: Option<usize>,
    /// Feature dimension [default: 2]
    #[arg(long)]
    pub dim: Option<usize>,
    /// Distance between class means [default: 6]
    #[arg(long)]
    pub separation: Option<f64>,
    /// Noise standard deviation [default: 0.5]
    #[arg(long)]
    pub noise: Option<f64>,
    /// Base pool size per class [default: 1000]
    #[arg(long)]
    pub pool_size: Option<usize>,
    /// micro or dual [default: micro]
    #[arg(long)]
    pub prior_level: Option<String>,
    /// Training epochs [default: 5]
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Bags per class in each batch [default: 16]
    #[arg(long)]
    pub batch_bags: Option<usize>,
    /// Base learning rate [default: 1e-5]
    #[arg(long)]
    pub lr: Option<f64>,
    /// Pseudo-label loss weight [default: 1]
    #[arg(long)]
    pub lambda_pse: Option<f64>,
    /// Attention-weighted PU risk weight [default: 1/π per cell]
    #[arg(long)]
    pub lambda_bfgpu: Option<f64>,
    /// k for mil_topk; cells with k >= bag length are skipped [default: 3]
    #[arg(long)]
    pub topk: Option<usize>,
    /// Hidden units [default: 32]
    #[arg(long)]
    pub hidden: Option<usize>,
    /// Force ADT on or off for all methods [default: per-method]
    #[arg(long)]
    pub adt: Option<bool>,
    /// Worker threads; 0 uses all cores
    #[arg(long, default_value_t = 1)]
    pub jobs: usize,
    /// Per-cell CSV path [required]
    #[arg(long)]
    pub out_csv: Option<PathBuf>,
    /// Aggregate JSON path [required]
    #[arg(long)]
    pub out_json: Option<PathBuf>,
}

#[derive(Debug, Args)]
#[command(allow_negative_numbers = true)]
pub struct BoundsArgs {
    /// TOML config file; its [bounds] table supplies defaults for these flags.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Complexity constant C_G [default: 1]
    #[arg(long)]
    pub c_g: Option<f64>,
    /// Lipschitz constant α_L [default: 1]
    #[arg(long)]
    pub alpha_l: Option<f64>,
    /// Confidence parameter δ in (0, 1) [default: 0.05]
    #[arg(long)]
    pub delta: Option<f64>,
    /// Positive sample count [default: 10000]
    #[arg(long)]
    pub n_p: Option<f64>,
    /// Unlabeled sample count [default: 10000]
    #[arg(long)]
    pub n_u: Option<f64>,
    /// Discrepancy term [default: 0]
    #[arg(long)]
    pub disc: Option<f64>,
    /// Pseudo-label inconsistency term [default: 0]
    #[arg(long)]
    pub p_inc: Option<f64>,
    /// Comma-separated σ_micro values [default: 1,2,5,10]
    #[arg(long, value_delimiter = ',')]
    pub sigma_micro: Option<Vec<f64>>,
    /// Comma-separated σ_macro values [default: 1,2,5,10]
    #[arg(long, value_delimiter = ',')]
    pub sigma_macro: Option<Vec<f64>>,
    /// Output CSV path [default: stdout]
    #[arg(short, long)]
    pub out: Option<PathBuf>,
}

fn load_config(path: &Option<PathBuf>) -> Result<RunConfig> {
    match path {
        Some(p) => RunConfig::load(p).map_err(|e| match e {
            Error::Io(io) => Error::invalid_config(format!("cannot read config {}: {io}", p.display())),
            other => other,
        }),
        None => Ok(RunConfig::default()),
    }
}

fn required<T>(v: Option<T>, flag: &str) -> Result<T> {
    v.ok_or_else(|| Error::invalid_config(format!("{flag} is required")))
}

fn flag_err(flag: &str, e: Error) -> Error {
    match e {
        Error::InvalidConfig(msg) => Error::InvalidConfig(format!("{flag}: {msg}")),
        other => other,
    }
}

fn write_file(path: &Path, f: impl FnOnce(&mut BufWriter<File>) -> Result<()>) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    f(&mut w)?;
    w.flush()?;
    Ok(())
}

fn write_json_or_stdout<T: serde::Serialize>(value: &T, path: Option<&Path>) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    match path {
        Some(p) => write_file(p, |w| Ok(writeln!(w, "{text}")?)),
        None => {
            println!("{text}");
            Ok(())
        }
    }
}

fn cmd_synth(args: SynthArgs) -> Result<()> {
    let c = load_config(&args.config)?.synth;
    let sigma_micro = args.sigma_micro.or(c.sigma_micro).unwrap_or(5);
    let sigma_macro = args.sigma_macro.or(c.sigma_macro).unwrap_or(1.0);
    if sigma_micro < 1 {
        return Err(Error::invalid_config("--sigma-micro must be >= 1"));
    }
    if !(sigma_macro.is_finite() && sigma_macro > 0.0) {
        return Err(Error::invalid_config("--sigma-macro must be a positive finite number"));
    }
    let spec = ImbalanceSpec::new(sigma_micro, sigma_macro)?;
    let mut cfg = SynthConfig::new(spec, args.neg_bags.or(c.neg_bags).unwrap_or(50), args.seed.or(c.seed).unwrap_or(0));
    if let Some(d) = args.dim.or(c.dim) {
        cfg.dim = d;
    }
    if let Some(s) = args.separation.or(c.separation) {
        cfg.cluster_separation = s;
    }
    if let Some(n) = args.noise.or(c.noise) {
        cfg.noise_scale = n;
    }
    if let Some(p) = args.pool_size.or(c.pool_size) {
        cfg.pool_size = p;
    }
    let out = required(args.out.or(c.out), "--out")?;
    cfg.validate()?;

    let (train_set, held_out) = generate_with_held_out(&cfg)?;
    save_dataset(&train_set, &out)?;
    if let Some(h) = args.held_out.or(c.held_out) {
        save_dataset(&held_out, h)?;
    }
    if let Some(path) = args.csv.or(c.csv) {
        export_instance_csv(&train_set, path)?;
    }
    eprintln!("wrote {} bags ({} instances) to {}", train_set.len(), train_set.n_instances(), out.display());
    Ok(())
}

/// `π` from the data's observed imbalance ratios.
pub fn estimate_prior(dataset: &Dataset, level: PriorLevel) -> Result<f64> {
    let sm = dataset
        .sigma_micro()
        .ok_or_else(|| Error::InsufficientData("no anomalous bags to estimate the prior from".into()))?;
    let sb = dataset.sigma_macro().unwrap_or(1.0);
    prior_from_ratios(sm, sb, level).map_err(|e| Error::InsufficientData(format!("cannot estimate prior: {e}")))
}

fn parse_prior_level(s: Option<String>, cfg: Option<PriorLevel>) -> Result<PriorLevel> {
    match s {
        Some(s) => s.parse().map_err(|e| flag_err("--prior-level", e)),
        None => Ok(cfg.unwrap_or_default()),
    }
}

fn cmd_train(args: TrainArgs) -> Result<()> {
    let c = load_config(&args.config)?.train;
    let method = match args.method {
        Some(m) => m.parse().map_err(|e| flag_err("--method", e))?,
        None => c.method.unwrap_or(Method::Bfgpu),
    };
    let level = parse_prior_level(args.prior_level, c.prior_level)?;
    let data_path = required(args.data.or(c.data), "--data")?;
    let out = required(args.out.or(c.out), "--out")?;
    let explicit_prior = args.prior.or(c.prior);
    if let Some(p) = explicit_prior {
        if !(p > 0.0 && p < 1.0) {
            return Err(Error::invalid_config("--prior must lie in (0, 1)"));
        }
    }

    let dataset = load_dataset(&data_path)?;
    let prior = match explicit_prior {
        Some(p) => p,
        None => estimate_prior(&dataset, level)?,
    };
    let mut cfg = TrainConfig::new(method, prior);
    cfg.seed = args.seed.or(c.seed).unwrap_or(0);
    cfg.lr = args.lr.or(c.lr).unwrap_or(DEFAULT_LR);
    cfg.epochs = args.epochs.or(c.epochs).unwrap_or(cfg.epochs);
    cfg.batch_bags = args.batch_bags.or(c.batch_bags).unwrap_or(cfg.batch_bags);
    cfg.lambda_bfgpu = args.lambda_bfgpu.or(c.lambda_bfgpu).unwrap_or(cfg.lambda_bfgpu);
    cfg.lambda_pse = args.lambda_pse.or(c.lambda_pse).unwrap_or(cfg.lambda_pse);
    cfg.topk = args.topk.or(c.topk).unwrap_or(cfg.topk);
    cfg.hidden = args.hidden.or(c.hidden).unwrap_or(DEFAULT_HIDDEN);
    cfg.adt = args.adt.or(c.adt).unwrap_or(cfg.adt);
    cfg.validate()?;

    let held_out = args.held_out.or(c.held_out).map(load_dataset).transpose()?;
    let model = train(&dataset, &cfg)?;
    model.save(&out)?;
    if let Some(curve) = args.curve.or(c.curve) {
        write_file(&curve, |w| model.write_curve_csv(w))?;
    }
    eprintln!("trained {method} (π = {prior:.6}, T = {:.6}); checkpoint at {}", model.threshold, out.display());
    if let Some(h) = held_out {
        let report = evaluate(&model, &h)?;
        write_json_or_stdout(&report, args.report.or(c.report).as_deref())?;
    }
    Ok(())
}

fn write_predictions<W: Write>(preds: &[MacroPrediction], writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["bag_id", "label", "max_instance_score", "bag_score", "offending_instance"])?;
    for p in preds {
        w.write_record([
            p.bag_id.clone(),
            p.label.sign().to_string(),
            p.max_instance_score.to_string(),
            p.bag_score.to_string(),
            p.offending_instance.map(|i| i.to_string()).unwrap_or_default(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

fn cmd_eval(args: EvalArgs) -> Result<()> {
    let c = load_config(&args.config)?.eval;
    let model_path = required(args.model.or(c.model), "--model")?;
    let data_path = required(args.data.or(c.data), "--data")?;
    let model = TrainedModel::load(&model_path)?;
    let dataset = load_dataset(&data_path)?;
    let preds = predict_dataset(&model, &dataset)?;
    if let Some(path) = args.predictions.or(c.predictions) {
        write_file(&path, |w| write_predictions(&preds, w))?;
    }
    let labels: Vec<_> = preds.iter().map(|p| p.label).collect();
    let truths: Vec<_> = dataset.bags().iter().map(|b| b.macro_label).collect();
    let report = metrics(&labels, &truths)?;
    write_json_or_stdout(&report, args.out.or(c.out).as_deref())
}

fn cmd_sweep(args: SweepArgs) -> Result<()> {
    let mut grid = load_config(&args.config)?.sweep;
    if let Some(ms) = args.methods {
        grid.methods = ms.iter().map(|m| m.parse()).collect::<Result<_>>().map_err(|e| flag_err("--methods", e))?;
    }
    if let Some(v) = args.sigma_micro {
        grid.sigma_micro = v;
    }
    if let Some(v) = args.sigma_macro {
        grid.sigma_macro = v;
    }
    if let Some(v) = args.seeds {
        grid.seeds = v;
    }
    if let Some(v) = args.neg_bags {
        grid.n_negative_bags = v;
    }
    if let Some(v) = args.dim {
        grid.dim = v;
    }
    if let Some(v) = args.separation {
        grid.cluster_separation = v;
    }
    if let Some(v) = args.noise {
        grid.noise_scale = v;
    }
    if let Some(v) = args.pool_size {
        grid.pool_size = v;
    }
    if args.prior_level.is_some() {
        grid.prior_level = parse_prior_level(args.prior_level, None)?;
    }
    if let Some(v) = args.epochs {
        grid.epochs = v;
    }
    if let Some(v) = args.batch_bags {
        grid.batch_bags = v;
    }
    if let Some(v) = args.lr {
        grid.lr = v;
    }
    if let Some(v) = args.lambda_pse {
        grid.lambda_pse = v;
    }
    if args.lambda_bfgpu.is_some() {
        grid.lambda_bfgpu = args.lambda_bfgpu;
    }
    if let Some(v) = args.topk {
        grid.topk = v;
    }
    if let Some(v) = args.hidden {
        grid.hidden = v;
    }
    if args.adt.is_some() {
        grid.adt = args.adt;
    }
    let out_csv = required(args.out_csv, "--out-csv")?;
    let out_json = required(args.out_json, "--out-json")?;
    grid.validate()?;

    let report = run_sweep(&grid, args.jobs)?;
    write_file(&out_csv, |w| report.write_csv(w))?;
    write_json_or_stdout(&report.summary(), Some(&out_json))?;

    let failed = report.n_failed();
    let attempted = report.rows.len() - report.n_skipped();
    if failed > 0 {
        eprintln!("warning: {failed} of {attempted} cells failed");
        for r in &report.rows {
            if let crate::eval::CellOutcome::Failed { message } = &r.outcome {
                eprintln!(
                    "  {} σ_micro={} σ_macro={} seed={}: {message}",
                    r.method, r.sigma_micro, r.sigma_macro, r.seed
                );
            }
        }
    }
    if attempted > 0 && failed == attempted {
        return Err(Error::TrainingFailure { epoch: 0, message: "every sweep cell failed".into() });
    }
    eprintln!("wrote {} rows to {}", report.rows.len(), out_csv.display());
    Ok(())
}

fn cmd_bounds(args: BoundsArgs) -> Result<()> {
    let c = load_config(&args.config)?.bounds;
    let d = BoundInputs::default();
    let base = BoundInputs {
        c_g: args.c_g.or(c.c_g).unwrap_or(d.c_g),
        alpha_l: args.alpha_l.or(c.alpha_l).unwrap_or(d.alpha_l),
        delta: args.delta.or(c.delta).unwrap_or(d.delta),
        n_p: args.n_p.or(c.n_p).unwrap_or(d.n_p),
        n_u: args.n_u.or(c.n_u).unwrap_or(d.n_u),
        disc: args.disc.or(c.disc).unwrap_or(d.disc),
        p_inc: args.p_inc.or(c.p_inc).unwrap_or(d.p_inc),
        ..d
    };
    let grid = vec![1.0, 2.0, 5.0, 10.0];
    let sm = args.sigma_micro.or(c.sigma_micro).unwrap_or_else(|| grid.clone());
    let sb = args.sigma_macro.or(c.sigma_macro).unwrap_or(grid);
    let rows = bounds_grid(&base, &sm, &sb)?;
    match args.out.or(c.out) {
        Some(p) => write_file(&p, |w| write_bounds_csv(&rows, w)),
        None => write_bounds_csv(&rows, io::stdout().lock()),
    }
}

pub fn execute(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Synth(a) => cmd_synth(a),
        Command::Train(a) => cmd_train(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Sweep(a) => cmd_sweep(a),
        Command::Bounds(a) => cmd_bounds(a),
    }
}

/// Parses arguments (including the program name), runs the command, reports
/// errors on stderr, and returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_CONFIG } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    match execute(cli) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
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
    fn every_flag_documents_its_default() {
        for sub in Cli::command().get_subcommands() {
            for arg in sub.get_arguments() {
                let id = arg.get_id().as_str();
                if matches!(id, "help" | "config" | "version") {
                    continue;
                }
                let help = arg.get_help().map(|h| h.to_string()).unwrap_or_default();
                let documented =
                    help.contains("[default:") || help.contains("[required]") || arg.get_default_values().len() == 1;
                assert!(documented, "{} --{id} lacks a default in its help", sub.get_name());
            }
        }
    }

    #[test]
    fn config_rejects_unknown_keys() {
        assert!(matches!(RunConfig::parse("[train]\nepochz = 3\n"), Err(Error::InvalidConfig(_))));
        assert!(matches!(RunConfig::parse("[nonsense]\n"), Err(Error::InvalidConfig(_))));
        let cfg = RunConfig::parse("[train]\nmethod = \"mil_max\"\nepochs = 3\n[sweep]\nseeds = [4]\n").unwrap();
        assert_eq!(cfg.train.method, Some(Method::MilMax));
        assert_eq!(cfg.train.epochs, Some(3));
        assert_eq!(cfg.sweep.seeds, vec![4]);
        assert_eq!(cfg.sweep.sigma_micro, SweepGrid::default().sigma_micro);
    }

    #[test]
    fn exit_codes() {
        assert_eq!(exit_code(&Error::invalid_config("x")), EXIT_CONFIG);
        assert_eq!(exit_code(&Error::Schema("x".into())), EXIT_DATA);
        assert_eq!(exit_code(&Error::TrainingFailure { epoch: 1, message: "x".into() }), EXIT_TRAINING);
        assert_eq!(run(["bfgpu", "bounds", "--delta", "1.5"]), EXIT_CONFIG);
        assert_eq!(run(["bfgpu", "frobnicate"]), EXIT_CONFIG);
        assert_eq!(run(["bfgpu", "synth", "--sigma-micro", "-1", "-o", "/dev/null"]), EXIT_CONFIG);
    }
}
