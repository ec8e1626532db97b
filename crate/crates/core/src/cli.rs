//! Command-line verbs and the run manifest written next to every result.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::data::{encode_pgm, generate, mix_seed_str, read_dataset, split_train_val, write_dataset, Dataset, DatasetKind, DatasetSpec, MaskImagePair};
use crate::diffusion::{Denoiser, Target, TimestepWeights};
use crate::error::{config_err, format_err, Error, Result};
use crate::metrics::{
    derivative_weights, fingerprint, parse_t_grid, profile_mask_error, profile_training_loss, smooth, Objective, TimestepProfile,
    DEFAULT_SMOOTHING_WINDOW, DEFAULT_WEIGHT_FLOOR,
};
use crate::model::{DenoiserModel, ModelConfig, Variant};
use crate::report::{line_plot, profile_plot, write_atomic, Series};
use crate::train::{self, evaluate, Experiment, ScheduleConfig, TrainConfig};

pub const TOOL: &str = "diffseg";
pub const MANIFEST_NAME: &str = "run.json";
pub const OUT_ENV: &str = "DIFFSEG_OUT";
pub const DEFAULT_OUT_ROOT: &str = "diffseg-out";

#[derive(Debug, Parser)]
#[command(name = "diffseg", version, about = "Train, evaluate and profile small diffusion segmentation models")]
#[command(args_override_self = true)]
pub struct Cli {
    /// Root seed; every subsystem derives its own stream from it.
    #[arg(long, global = true, default_value_t = 0)]
    pub seed: u64,
    /// Output root for verbs without --out-dir (else $DIFFSEG_OUT, else ./diffseg-out).
    #[arg(long, global = true)]
    pub out_root: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic mask/image dataset as PGM pairs.
    GenData(GenDataArgs),
    /// Train one of the four experiment regimes.
    Train(TrainArgs),
    /// Ensemble a checkpoint over a dataset split.
    Eval(EvalArgs),
    /// Per-timestep mask-error or loss profiles.
    Profile(ProfileArgs),
    /// Timestep weights from the slope of a profile.
    Weights(WeightsArgs),
    /// SVG plots and an index for the CSVs in a directory.
    Report(ReportArgs),
    /// Re-run the command stored in a run manifest.
    Replay(ReplayArgs),
}

#[derive(Debug, Args)]
pub struct GenDataArgs {
    #[arg(long)]
    pub kind: DatasetKind,
    #[arg(long, default_value_t = 64)]
    pub count: usize,
    #[arg(long, default_value_t = 32)]
    pub size: usize,
    /// Fraction of samples in the training split.
    #[arg(long, default_value_t = 0.8)]
    pub split: f64,
    #[arg(long)]
    pub out_dir: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub experiment: Experiment,
    #[arg(long, default_value = "concat")]
    pub variant: Variant,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub base_channels: Option<usize>,
    #[arg(long)]
    pub depth: Option<usize>,
    #[arg(long)]
    pub time_embed_dim: Option<usize>,
    /// Diffusion length T.
    #[arg(long)]
    pub t_steps: Option<usize>,
    #[arg(long)]
    pub beta_start: Option<f64>,
    #[arg(long)]
    pub beta_end: Option<f64>,
    /// Timestep weights CSV (t,weight), e2 and e3 only.
    #[arg(long)]
    pub weights: Option<PathBuf>,
    #[arg(long)]
    pub ensemble_n: Option<usize>,
    #[arg(long)]
    pub eval_every: Option<usize>,
    #[arg(long)]
    pub eval_samples: Option<usize>,
    #[arg(long)]
    pub log_every: Option<usize>,
    /// Weight of the Dice term in the e1 loss.
    #[arg(long)]
    pub dice_mix: Option<f64>,
    /// Assert the experiment sees the condition image.
    #[arg(long, conflicts_with = "unconditioned")]
    pub conditioned: bool,
    /// Assert the experiment runs without the condition image.
    #[arg(long)]
    pub unconditioned: bool,
    #[arg(long)]
    pub out_dir: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum SplitChoice {
    Train,
    Val,
    All,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    /// Ensemble size (default 10).
    #[arg(long, conflicts_with = "preset")]
    pub ensemble_n: Option<usize>,
    /// Use the ensemble size preset for the dataset kind.
    #[arg(long)]
    pub preset: bool,
    #[arg(long, value_enum, default_value_t = SplitChoice::Val)]
    pub split: SplitChoice,
    #[arg(long)]
    pub out_dir: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum Metric {
    MaskError,
    Loss,
}

#[derive(Debug, Args)]
pub struct ProfileArgs {
    /// Checkpoint evaluated with the condition image (repeatable).
    #[arg(long = "cond")]
    pub cond: Vec<PathBuf>,
    /// Checkpoint evaluated without the condition image (repeatable).
    #[arg(long = "uncond")]
    pub uncond: Vec<PathBuf>,
    /// Dataset directory, once for all curves or once per curve (--cond first, then --uncond).
    #[arg(long, required = true)]
    pub data: Vec<PathBuf>,
    /// Curve labels in the same order as the checkpoints.
    #[arg(long)]
    pub label: Vec<String>,
    #[arg(long, value_enum, default_value_t = Metric::MaskError)]
    pub metric: Metric,
    /// Zero-based start:end:stride over the diffusion steps.
    #[arg(long, default_value = "0:999:10")]
    pub t_grid: String,
    #[arg(long, default_value_t = 32)]
    pub n_eval: usize,
    /// Moving-average window in grid points (odd); 1 disables smoothing.
    #[arg(long, default_value_t = DEFAULT_SMOOTHING_WINDOW)]
    pub window: usize,
    #[arg(long)]
    pub out_dir: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct WeightsArgs {
    /// Profile CSV (t,value,smoothed_value).
    #[arg(long)]
    pub profile: PathBuf,
    #[arg(long, default_value_t = DEFAULT_WEIGHT_FLOOR)]
    pub floor: f64,
    #[arg(long, default_value_t = crate::diffusion::DEFAULT_STEPS)]
    pub steps: usize,
    #[arg(long)]
    pub out_dir: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    #[arg(long)]
    pub input: PathBuf,
    /// Defaults to the input directory.
    #[arg(long)]
    pub out_dir: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ReplayArgs {
    pub manifest: PathBuf,
    /// Write outputs here instead of the recorded directory.
    #[arg(long)]
    pub out_dir: Option<PathBuf>,
}

/// What a command did, written before it starts and rewritten when it ends.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub tool: String,
    pub version: String,
    pub command: String,
    /// Arguments after the program name, as given.
    pub argv: Vec<String>,
    /// Working directory the arguments are relative to.
    pub cwd: PathBuf,
    pub seed: u64,
    pub out_dir: PathBuf,
    pub config: serde_json::Value,
    /// Files written, relative to `out_dir`.
    pub outputs: Vec<String>,
    pub status: String,
    pub error: Option<String>,
    pub wall_clock_secs: f64,
}

impl RunManifest {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        serde_json::from_str(&text).map_err(|e| format_err!("{}: {e}", path.display()))
    }

    fn save(&self) -> Result<()> {
        let mut text = serde_json::to_string_pretty(self).map_err(|e| Error::State(e.to_string()))?;
        text.push('\n');
        write_atomic(&self.out_dir.join(MANIFEST_NAME), text.as_bytes())
    }
}

/// Parses arguments, runs the verb and returns the process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let args: Vec<OsString> = args.into_iter().map(Into::into).collect();
    let cli = match Cli::try_parse_from(&args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    let argv: Vec<String> = args.iter().skip(1).map(|a| a.to_string_lossy().into_owned()).collect();
    match run(cli, argv) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("{TOOL}: {e}");
            e.exit_code()
        }
    }
}

fn out_root(flag: Option<PathBuf>) -> PathBuf {
    flag.or_else(|| std::env::var_os(OUT_ENV).filter(|v| !v.is_empty()).map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from(DEFAULT_OUT_ROOT))
}

/// Runs a parsed command. `argv` is stored in the manifest for replay.
pub fn run(cli: Cli, argv: Vec<String>) -> Result<()> {
    let root = out_root(cli.out_root);
    let seed = cli.seed;
    let (name, out_dir) = match &cli.command {
        Command::GenData(a) => ("gen-data", a.out_dir.clone()),
        Command::Train(a) => ("train", a.out_dir.clone()),
        Command::Eval(a) => ("eval", a.out_dir.clone()),
        Command::Profile(a) => ("profile", a.out_dir.clone()),
        Command::Weights(a) => ("weights", a.out_dir.clone()),
        Command::Report(a) => ("report", a.out_dir.clone().or_else(|| Some(a.input.clone()))),
        Command::Replay(a) => return replay(a),
    };
    let out_dir = out_dir.unwrap_or_else(|| root.join(name));
    fs::create_dir_all(&out_dir)?;
    let mut manifest = RunManifest {
        tool: TOOL.into(),
        version: env!("CARGO_PKG_VERSION").into(),
        command: name.into(),
        argv,
        cwd: std::env::current_dir()?,
        seed,
        out_dir: out_dir.clone(),
        config: serde_json::Value::Null,
        outputs: Vec::new(),
        status: "running".into(),
        error: None,
        wall_clock_secs: 0.0,
    };
    manifest.save()?;
    let started = Instant::now();
    let mut out = Outputs { dir: out_dir, files: Vec::new() };
    let result = match cli.command {
        Command::GenData(a) => cmd_gen_data(&a, seed, &mut out, &mut manifest.config),
        Command::Train(a) => cmd_train(&a, seed, &mut out, &mut manifest.config),
        Command::Eval(a) => cmd_eval(&a, seed, &mut out, &mut manifest.config),
        Command::Profile(a) => cmd_profile(&a, seed, &mut out, &mut manifest.config),
        Command::Weights(a) => cmd_weights(&a, &mut out, &mut manifest.config),
        Command::Report(a) => cmd_report(&a, &mut out, &mut manifest.config),
        Command::Replay(_) => unreachable!(),
    };
    manifest.outputs = out.files;
    manifest.wall_clock_secs = started.elapsed().as_secs_f64();
    match &result {
        Ok(()) => manifest.status = "ok".into(),
        Err(e) => {
            manifest.status = "failed".into();
            manifest.error = Some(e.to_string());
        }
    }
    manifest.save()?;
    result
}

fn replay(a: &ReplayArgs) -> Result<()> {
    let m = RunManifest::load(&a.manifest)?;
    if m.tool != TOOL {
        return Err(format_err!("{} is not a {TOOL} manifest", a.manifest.display()));
    }
    std::env::set_current_dir(&m.cwd)?;
    let mut args: Vec<String> = vec![TOOL.into()];
    args.extend(m.argv.iter().cloned());
    let out_dir = a.out_dir.clone().unwrap_or(m.out_dir);
    args.push("--out-dir".into());
    args.push(out_dir.to_string_lossy().into_owned());
    let cli = Cli::try_parse_from(&args).map_err(|e| config_err!("stored arguments no longer parse: {e}"))?;
    if matches!(cli.command, Command::Replay(_)) {
        return Err(config_err!("a replay manifest cannot be replayed"));
    }
    run(cli, args[1..].to_vec())
}

/// Output directory plus the relative paths written so far.
struct Outputs {
    dir: PathBuf,
    files: Vec<String>,
}

impl Outputs {
    fn write(&mut self, rel: &str, bytes: &[u8]) -> Result<PathBuf> {
        let path = self.dir.join(rel);
        write_atomic(&path, bytes)?;
        self.files.push(rel.to_string());
        Ok(path)
    }
}

fn cmd_gen_data(a: &GenDataArgs, seed: u64, out: &mut Outputs, config: &mut serde_json::Value) -> Result<()> {
    let spec = DatasetSpec::new(a.kind, a.count, a.size, mix_seed_str(seed, "data"));
    let split_seed = mix_seed_str(seed, "split");
    *config = json!({
        "kind": a.kind.as_str(),
        "count": a.count,
        "size": a.size,
        "split": a.split,
        "data_seed": spec.seed,
        "split_seed": split_seed,
        "params": format!("{:?}", spec.params),
    });
    let items = generate(&spec)?;
    let (train, val) = split_train_val(&items, a.split, split_seed)?;
    let ds = Dataset { kind: a.kind.as_str().into(), size: a.size, train, val };
    for p in write_dataset(&out.dir, &ds)? {
        out.files.push(p.strip_prefix(&out.dir).unwrap_or(&p).to_string_lossy().into_owned());
    }
    println!("wrote {} pairs ({} train, {} val) to {}", items.len(), ds.train.len(), ds.val.len(), out.dir.display());
    Ok(())
}

fn train_config(a: &TrainArgs, data: &Dataset, seed: u64) -> Result<TrainConfig> {
    let e = a.experiment;
    if a.conditioned && !e.conditioned() {
        return Err(config_err!("--conditioned conflicts with --experiment {e}, which trains without the condition image"));
    }
    if a.unconditioned && e.conditioned() {
        return Err(config_err!("--unconditioned conflicts with --experiment {e}, which needs the condition image"));
    }
    if a.weights.is_some() && !e.accepts_weights() {
        return Err(config_err!("--weights conflicts with --experiment {e}; timestep weights apply to e2 and e3"));
    }
    let d = ModelConfig::default();
    let model = ModelConfig {
        variant: a.variant,
        base_channels: a.base_channels.unwrap_or(d.base_channels),
        depth: a.depth.unwrap_or(d.depth),
        time_embed_dim: a.time_embed_dim.unwrap_or(d.time_embed_dim),
        image_channels: 1,
        size: data.size,
    };
    let s = ScheduleConfig::default();
    let schedule = ScheduleConfig {
        steps: a.t_steps.unwrap_or(s.steps),
        beta_start: a.beta_start.unwrap_or(s.beta_start),
        beta_end: a.beta_end.unwrap_or(s.beta_end),
    };
    let weights = match &a.weights {
        Some(p) => Some(TimestepWeights::from_csv(&fs::read_to_string(p)?)?),
        None => None,
    };
    let base = TrainConfig::new(e, model);
    let cfg = TrainConfig {
        schedule,
        lr: a.lr.unwrap_or(base.lr),
        batch_size: a.batch_size.unwrap_or(base.batch_size),
        steps: a.steps.unwrap_or(base.steps),
        seed,
        weights,
        ensemble_n: a.ensemble_n.unwrap_or(base.ensemble_n),
        dice_mix: a.dice_mix.unwrap_or(base.dice_mix),
        log_every: a.log_every.unwrap_or(base.log_every),
        eval_every: a.eval_every.unwrap_or(base.eval_every),
        eval_samples: a.eval_samples.unwrap_or(base.eval_samples),
        ..base
    };
    cfg.validate()?;
    Ok(cfg)
}

fn cmd_train(a: &TrainArgs, seed: u64, out: &mut Outputs, config: &mut serde_json::Value) -> Result<()> {
    let data = read_dataset(&a.data)?;
    let cfg = train_config(a, &data, seed)?;
    *config = json!({
        "experiment": cfg.experiment.as_str(),
        "target": cfg.experiment.target().as_str(),
        "conditioned": cfg.experiment.conditioned(),
        "data": a.data,
        "data_kind": data.kind,
        "variant": cfg.model.variant.as_str(),
        "base_channels": cfg.model.base_channels,
        "depth": cfg.model.depth,
        "time_embed_dim": cfg.model.time_embed_dim,
        "size": cfg.model.size,
        "diffusion_steps": cfg.schedule.steps,
        "beta_start": cfg.schedule.beta_start,
        "beta_end": cfg.schedule.beta_end,
        "optimizer": "adam",
        "lr": cfg.lr,
        "batch_size": cfg.batch_size,
        "train_steps": cfg.steps,
        "weights": a.weights,
        "ensemble_n": cfg.ensemble_n,
        "dice_mix": cfg.dice_mix,
        "log_every": cfg.log_every,
        "eval_every": cfg.eval_every,
        "eval_samples": cfg.eval_samples,
    });
    let trained = train::train(&cfg, &data)?;
    let ckpt = out.dir.join("model.ckpt");
    trained.model.save(&ckpt)?;
    out.files.push("model.ckpt".into());
    out.write("record.csv", trained.record.to_csv().as_bytes())?;
    println!(
        "{} trained {} steps in {:.1}s; loss {:.5} -> {:.5}",
        cfg.experiment,
        cfg.steps,
        trained.record.wall_clock_secs,
        trained.record.first_loss().unwrap_or(f64::NAN),
        trained.record.final_loss().unwrap_or(f64::NAN)
    );
    Ok(())
}

fn split_of(data: &Dataset, split: SplitChoice) -> Vec<MaskImagePair> {
    match split {
        SplitChoice::Train => data.train.clone(),
        SplitChoice::Val => data.val.clone(),
        SplitChoice::All => data.all().cloned().collect(),
    }
}

fn cmd_eval(a: &EvalArgs, seed: u64, out: &mut Outputs, config: &mut serde_json::Value) -> Result<()> {
    let model = DenoiserModel::load(&a.checkpoint)?;
    let data = read_dataset(&a.data)?;
    if data.size != model.config().size {
        return Err(config_err!("checkpoint expects {0}x{0} inputs but {1} holds {2}x{2} images", model.config().size, a.data.display(), data.size));
    }
    let n = match (a.ensemble_n, a.preset) {
        (Some(n), _) => n,
        (None, true) => data.kind.parse::<DatasetKind>()?.ensemble_preset(),
        (None, false) => 10,
    };
    if n == 0 {
        return Err(config_err!("--ensemble-n must be at least 1"));
    }
    let pairs = split_of(&data, a.split);
    let eval_seed = mix_seed_str(seed, "eval");
    *config = json!({
        "checkpoint": a.checkpoint,
        "data": a.data,
        "split": format!("{:?}", a.split).to_lowercase(),
        "ensemble_n": n,
        "target": model.target().as_str(),
        "eval_seed": eval_seed,
    });
    let sched = model.schedule()?;
    let report = evaluate(&model, &pairs, n, &sched, eval_seed)?;
    out.write("summary.csv", report.summary_csv().as_bytes())?;
    let mut cal = String::from("bin,lower,upper,confidence,accuracy,count\n");
    let bins = report.calibration.bins.len();
    for (i, b) in report.calibration.bins.iter().enumerate() {
        let lo = 0.5 + 0.5 * i as f64 / bins as f64;
        let hi = 0.5 + 0.5 * (i + 1) as f64 / bins as f64;
        cal.push_str(&format!("{i},{lo},{hi},{},{},{}\n", b.confidence, b.accuracy, b.count));
    }
    out.write("calibration.csv", cal.as_bytes())?;
    for (p, m) in pairs.iter().zip(&report.maps) {
        for (suffix, values) in [("mean", &m.mean), ("std", &m.std), ("pred", &m.mask)] {
            out.write(&format!("maps/{}_{suffix}.pgm", p.id), &encode_pgm(p.size, p.size, values)?)?;
        }
    }
    println!("{} images, n={n}: mean IoU {:.4}, ECE {:.4}", pairs.len(), report.mean_iou, report.calibration.ece);
    Ok(())
}

fn file_label(s: &str) -> String {
    s.chars().map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' { c } else { '_' }).collect()
}

fn cmd_profile(a: &ProfileArgs, seed: u64, out: &mut Outputs, config: &mut serde_json::Value) -> Result<()> {
    let curves: Vec<(&PathBuf, bool)> = a.cond.iter().map(|p| (p, true)).chain(a.uncond.iter().map(|p| (p, false))).collect();
    if curves.is_empty() {
        return Err(config_err!("give at least one --cond or --uncond checkpoint"));
    }
    if a.data.len() != 1 && a.data.len() != curves.len() {
        return Err(config_err!("{} --data directories for {} checkpoints; give one or one per checkpoint", a.data.len(), curves.len()));
    }
    if !a.label.is_empty() && a.label.len() != curves.len() {
        return Err(config_err!("{} --label values for {} checkpoints", a.label.len(), curves.len()));
    }
    let datasets = a.data.iter().map(|d| read_dataset(d)).collect::<Result<Vec<_>>>()?;
    let models = curves.iter().map(|(p, _)| DenoiserModel::load(p)).collect::<Result<Vec<_>>>()?;
    let steps = models[0].steps();
    if models.iter().any(|m| m.steps() != steps) {
        return Err(config_err!("checkpoints use different diffusion lengths"));
    }
    let t_grid = parse_t_grid(&a.t_grid, steps)?;
    let profile_seed = mix_seed_str(seed, "profile");
    let labels: Vec<String> = if !a.label.is_empty() {
        a.label.clone()
    } else if datasets.len() > 1 {
        datasets.iter().map(|d| d.kind.clone()).collect()
    } else {
        curves.iter().map(|(_, c)| if *c { "conditioned" } else { "unconditioned" }.to_string()).collect()
    };
    let mut stems: Vec<String> = labels.iter().map(|l| file_label(l)).collect();
    for i in 0..stems.len() {
        if stems[..i].contains(&stems[i]) {
            stems[i] = format!("{}_{i}", stems[i]);
        }
    }
    let metric = match a.metric {
        Metric::MaskError => "mask_error",
        Metric::Loss => "loss",
    };
    *config = json!({
        "cond": a.cond,
        "uncond": a.uncond,
        "data": a.data,
        "labels": labels,
        "metric": metric,
        "t_grid": a.t_grid,
        "grid_points": t_grid.len(),
        "n_eval": a.n_eval,
        "window": a.window,
        "profile_seed": profile_seed,
    });
    let mut smoothed = Vec::new();
    for (i, ((model, (_, cond)), label)) in models.iter().zip(&curves).zip(&labels).enumerate() {
        let data = &datasets[if datasets.len() == 1 { 0 } else { i }];
        if data.size != model.config().size {
            return Err(config_err!("curve '{label}': checkpoint expects {0}x{0} inputs, data is {1}x{1}", model.config().size, data.size));
        }
        let pairs: Vec<MaskImagePair> = if data.val.is_empty() { data.train.clone() } else { data.val.clone() };
        let sched = model.schedule()?;
        let raw = match a.metric {
            Metric::MaskError => profile_mask_error(model, &pairs, &sched, &t_grid, *cond, a.n_eval, profile_seed)?,
            Metric::Loss => {
                let objective = match (model.target(), cond) {
                    (Target::X0, _) => Objective::MaskRecovery,
                    (Target::Eps, true) => Objective::DiffusionSegmentation,
                    (Target::Eps, false) => Objective::ImageGeneration,
                    (Target::Logits, _) => return Err(config_err!("curve '{label}': a feed-forward checkpoint has no diffusion loss")),
                };
                profile_training_loss(model, &pairs, objective, &sched, &t_grid, a.n_eval, profile_seed)?
            }
        };
        let mut p = smooth(&raw, a.window)?;
        p.label = label.clone();
        out.write(&format!("{}.csv", stems[i]), p.to_csv().as_bytes())?;
        smoothed.push(p);
    }
    let y_label = if a.metric == Metric::MaskError { "mask prediction error" } else { "loss" };
    let title = format!("{y_label} per timestep (window {})", a.window);
    out.write("plot.svg", profile_plot(&title, y_label, &smoothed)?.as_bytes())?;
    let summary = fingerprint(&smoothed)?;
    out.write("fingerprint.csv", summary.to_csv().as_bytes())?;
    for e in &summary.entries {
        println!("{}: t_half {} terminal {:.4} converged {}", e.label, e.t_half, e.terminal_value, e.converged);
    }
    println!("ordering: {}", summary.ordering_string());
    Ok(())
}

fn cmd_weights(a: &WeightsArgs, out: &mut Outputs, config: &mut serde_json::Value) -> Result<()> {
    *config = json!({ "profile": a.profile, "floor": a.floor, "steps": a.steps });
    let text = fs::read_to_string(&a.profile)?;
    let profile = TimestepProfile::from_csv("profile", &text)?;
    let weights = derivative_weights(&profile, a.floor, a.steps)?;
    let path = out.write("weights.csv", weights.to_csv().as_bytes())?;
    let back = TimestepWeights::from_csv(&fs::read_to_string(&path)?)?;
    if (back.mean() - 1.0).abs() > 1e-9 || back.len() != a.steps {
        return Err(Error::State(format!("weights file reloads with mean {} over {} steps", back.mean(), back.len())));
    }
    let (lo, hi) = back.as_slice().iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), &w| (l.min(w), h.max(w)));
    println!("{} weights, mean 1, range [{lo:.4}, {hi:.4}]", back.len());
    Ok(())
}

/// A record CSV as loss (and validation IoU) series against the step.
fn record_series(text: &str) -> Result<Vec<Series>> {
    let mut rdr = csv::Reader::from_reader(text.as_bytes());
    let mut loss = Vec::new();
    let mut val = Vec::new();
    for row in rdr.records() {
        let row = row.map_err(|e| format_err!("record csv: {e}"))?;
        let num = |i: usize| -> Result<Option<f64>> {
            match row.get(i).map(str::trim).unwrap_or("") {
                "" => Ok(None),
                s => s.parse().map(Some).map_err(|_| format_err!("record csv: bad number '{s}'")),
            }
        };
        let step = num(0)?.ok_or_else(|| format_err!("record csv: missing step"))?;
        if let Some(l) = num(1)? {
            loss.push((step, l));
        }
        if let Some(v) = num(2)? {
            val.push((step, v));
        }
    }
    let mut out = vec![Series { label: "train loss".into(), points: loss }];
    if !val.is_empty() {
        out.push(Series { label: "val IoU".into(), points: val });
    }
    Ok(out)
}

fn cmd_report(a: &ReportArgs, out: &mut Outputs, config: &mut serde_json::Value) -> Result<()> {
    *config = json!({ "input": a.input });
    let mut entries: Vec<PathBuf> = fs::read_dir(&a.input)?
        .map(|e| e.map(|e| e.path()))
        .collect::<std::io::Result<Vec<_>>>()?
        .into_iter()
        .filter(|p| p.extension().is_some_and(|x| x == "csv"))
        .collect();
    entries.sort();
    let mut index = format!("# Report for {}\n\n", a.input.display());
    let mut profiles = Vec::new();
    for path in &entries {
        let text = fs::read_to_string(path)?;
        let stem = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
        let header = text.lines().next().unwrap_or("").trim();
        let svg = match header {
            "t,value,smoothed_value" => {
                let p = TimestepProfile::from_csv(stem.clone(), &text)?;
                let raw = Series { label: format!("{stem} raw"), points: p.t_grid.iter().zip(&p.raw).map(|(&t, &v)| (t as f64, v)).collect() };
                let svg = line_plot(&stem, "timestep t", "value", &[raw, Series::from_profile(&p)])?;
                profiles.push(p);
                svg
            }
            "step,loss,val_iou,val_ece" => line_plot(&stem, "training step", "value", &record_series(&text)?)?,
            "t,weight" => {
                let w = TimestepWeights::from_csv(&text)?;
                let pts = w.as_slice().iter().enumerate().map(|(i, &v)| ((i + 1) as f64, v)).collect();
                line_plot(&stem, "timestep t", "weight", &[Series { label: "weight".into(), points: pts }])?
            }
            _ => {
                index.push_str(&format!("- `{}`: not plotted\n", path.file_name().unwrap_or_default().to_string_lossy()));
                continue;
            }
        };
        let name = format!("{stem}.svg");
        out.write(&name, svg.as_bytes())?;
        index.push_str(&format!("- `{stem}.csv`: ![{stem}]({name})\n"));
    }
    let same_grid = profiles.windows(2).all(|w| w[0].t_grid == w[1].t_grid);
    if profiles.len() > 1 && same_grid {
        out.write("profiles_overlay.svg", profile_plot("smoothed profiles", "value", &profiles)?.as_bytes())?;
        let summary = fingerprint(&profiles)?;
        index.push_str(&format!("\n![overlay](profiles_overlay.svg)\n\nOrdering by t_half: {}\n", summary.ordering_string()));
    }
    out.write("index.md", index.as_bytes())?;
    println!("report for {} csv files in {}", entries.len(), out.dir.display());
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse(args: &[&str]) -> std::result::Result<Cli, clap::Error> {
        Cli::try_parse_from(std::iter::once("diffseg").chain(args.iter().copied()))
    }

    #[test]
    fn unknown_kind_is_a_usage_error() {
        let e = parse(&["gen-data", "--kind", "retina"]).unwrap_err();
        assert_eq!(e.exit_code(), 2);
    }

    #[test]
    fn conflicting_flags_name_both() {
        let e = parse(&["eval", "--checkpoint", "c", "--data", "d", "--ensemble-n", "3", "--preset"]).unwrap_err();
        let msg = e.to_string();
        assert!(msg.contains("--ensemble-n") && msg.contains("--preset"), "{msg}");
        let e = parse(&["train", "--experiment", "e2", "--data", "d", "--conditioned", "--unconditioned"]).unwrap_err();
        let msg = e.to_string();
        assert!(msg.contains("--conditioned") && msg.contains("--unconditioned"), "{msg}");
    }

    #[test]
    fn experiment_conditioning_mismatch_names_both_flags() {
        let dir = tempfile::tempdir().unwrap();
        let ds = Dataset { kind: "lesion".into(), size: 8, train: vec![], val: vec![] };
        let Command::Train(a) = parse(&["train", "--experiment", "e3", "--data", "d", "--conditioned"]).unwrap().command else { panic!() };
        let msg = train_config(&a, &ds, 0).unwrap_err().to_string();
        assert!(msg.contains("--conditioned") && msg.contains("--experiment e3"), "{msg}");
        let w = dir.path().join("w.csv");
        fs::write(&w, TimestepWeights::uniform(1000).to_csv()).unwrap();
        let Command::Train(a) = parse(&["train", "--experiment", "e4", "--data", "d", "--weights", w.to_str().unwrap()]).unwrap().command else { panic!() };
        let e = train_config(&a, &ds, 0).unwrap_err();
        assert_eq!(e.exit_code(), 2);
        assert!(e.to_string().contains("--weights"));
    }

    #[test]
    fn e1_defaults() {
        let ds = Dataset { kind: "lesion".into(), size: 32, train: vec![], val: vec![] };
        let Command::Train(a) = parse(&["train", "--experiment", "e1", "--data", "d"]).unwrap().command else { panic!() };
        let cfg = train_config(&a, &ds, 0).unwrap();
        assert_eq!(cfg.lr, 1e-5);
        assert_eq!(cfg.model.size, 32);
    }

    #[test]
    fn out_root_precedence() {
        assert_eq!(out_root(Some("x".into())), PathBuf::from("x"));
    }

    #[test]
    fn manifest_json_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let m = RunManifest {
            tool: TOOL.into(),
            version: "0".into(),
            command: "weights".into(),
            argv: vec!["weights".into()],
            cwd: dir.path().into(),
            seed: 3,
            out_dir: dir.path().into(),
            config: json!({"floor": 0.05}),
            outputs: vec!["weights.csv".into()],
            status: "ok".into(),
            error: None,
            wall_clock_secs: 0.5,
        };
        m.save().unwrap();
        assert_eq!(RunManifest::load(&dir.path().join(MANIFEST_NAME)).unwrap(), m);
    }

    #[test]
    fn record_csv_series() {
        let s = record_series("step,loss,val_iou,val_ece\n1,0.5,,\n2,0.4,0.7,0.1\n").unwrap();
        assert_eq!(s.len(), 2);
        assert_eq!(s[0].points, vec![(1.0, 0.5), (2.0, 0.4)]);
        assert_eq!(s[1].points, vec![(2.0, 0.7)]);
    }
}
