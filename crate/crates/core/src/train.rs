//! The four training regimes, ensembled prediction and evaluation.
//!
//! * E1: feed-forward segmentation. The network sees standard-normal noise
//!   in place of x_t, timestep 0 and the image, and is trained with the
//!   Dice + cross-entropy loss.
//! * E2: diffusion segmentation, ε-prediction on masks conditioned on the image.
//! * E3: mask recovery, x₀-prediction on masks without the image.
//! * E4: unconditional image generation, ε-prediction on images.

use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Graph, Var};
use crate::data::{mix_seed, mix_seed_str, stack_encoded, Dataset, Field, MaskImagePair};
use crate::diffusion::{
    ddpm_sample, forward_sample, linear_schedule, sample_timestep, Denoiser, DiffusionSchedule, Target, TimestepWeights, DEFAULT_BETA_END,
    DEFAULT_BETA_START, DEFAULT_STEPS,
};
use crate::error::{config_err, data_err, shape_err, Error, Result};
use crate::metrics::{ece, iou, CalibrationReport, ECE_BINS};
use crate::model::{DenoiserModel, ModelConfig, BoundParams};
use crate::optim::{adam_step, AdamConfig, AdamState};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Experiment {
    E1,
    E2,
    E3,
    E4,
}

impl Experiment {
    pub const ALL: [Experiment; 4] = [Experiment::E1, Experiment::E2, Experiment::E3, Experiment::E4];

    pub fn as_str(self) -> &'static str {
        match self {
            Experiment::E1 => "e1",
            Experiment::E2 => "e2",
            Experiment::E3 => "e3",
            Experiment::E4 => "e4",
        }
    }

    pub fn target(self) -> Target {
        match self {
            Experiment::E1 => Target::Logits,
            Experiment::E2 | Experiment::E4 => Target::Eps,
            Experiment::E3 => Target::X0,
        }
    }

    /// Whether the network receives the condition image.
    pub fn conditioned(self) -> bool {
        matches!(self, Experiment::E1 | Experiment::E2)
    }

    /// Whether per-timestep loss weights apply.
    pub fn accepts_weights(self) -> bool {
        matches!(self, Experiment::E2 | Experiment::E3)
    }

    /// 1e-5 for feed-forward training, 1e-4 for the diffusion objectives.
    pub fn default_lr(self) -> f64 {
        match self {
            Experiment::E1 => 1e-5,
            _ => 1e-4,
        }
    }
}

impl fmt::Display for Experiment {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Experiment {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Experiment::ALL
            .into_iter()
            .find(|e| e.as_str().eq_ignore_ascii_case(s))
            .ok_or_else(|| config_err!("unknown experiment '{s}' (expected e1, e2, e3 or e4)"))
    }
}

/// Linear β schedule parameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScheduleConfig {
    pub steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        ScheduleConfig { steps: DEFAULT_STEPS, beta_start: DEFAULT_BETA_START, beta_end: DEFAULT_BETA_END }
    }
}

impl ScheduleConfig {
    pub fn build(&self) -> Result<DiffusionSchedule> {
        linear_schedule(self.steps, self.beta_start, self.beta_end)
    }

    /// The schedule recorded in a checkpoint.
    pub fn of_model(model: &DenoiserModel) -> Self {
        let (beta_start, beta_end) = model.beta_range();
        ScheduleConfig { steps: model.steps(), beta_start, beta_end }
    }
}

pub const DEFAULT_BATCH_SIZE: usize = 16;
pub const DEFAULT_TRAIN_STEPS: usize = 5000;
pub const DEFAULT_DICE_MIX: f64 = 0.5;

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub experiment: Experiment,
    pub model: ModelConfig,
    pub schedule: ScheduleConfig,
    pub lr: f64,
    pub batch_size: usize,
    pub steps: usize,
    pub seed: u64,
    pub weights: Option<TimestepWeights>,
    pub ensemble_n: usize,
    pub dice_mix: f64,
    /// Loss rows are written every `log_every` steps and at the end.
    pub log_every: usize,
    /// Validation metrics every `eval_every` steps and at the end; 0 disables them.
    pub eval_every: usize,
    /// Validation images used per evaluation (all when 0).
    pub eval_samples: usize,
}

impl TrainConfig {
    pub fn new(experiment: Experiment, model: ModelConfig) -> Self {
        TrainConfig {
            experiment,
            model,
            schedule: ScheduleConfig::default(),
            lr: experiment.default_lr(),
            batch_size: DEFAULT_BATCH_SIZE,
            steps: DEFAULT_TRAIN_STEPS,
            seed: 0,
            weights: None,
            ensemble_n: 10,
            dice_mix: DEFAULT_DICE_MIX,
            log_every: 50,
            eval_every: 0,
            eval_samples: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        if self.steps == 0 {
            return Err(config_err!("training steps must be at least 1"));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(config_err!("learning rate {} must be positive", self.lr));
        }
        if self.batch_size == 0 || self.ensemble_n == 0 || self.log_every == 0 {
            return Err(config_err!("batch_size, ensemble_n and log_every must be at least 1"));
        }
        if !(0.0..=1.0).contains(&self.dice_mix) {
            return Err(config_err!("dice mix {} outside [0, 1]", self.dice_mix));
        }
        if self.model.image_channels != 1 {
            return Err(config_err!("datasets carry single-channel images; image_channels must be 1"));
        }
        self.schedule.build()?;
        if let Some(w) = &self.weights {
            if !self.experiment.accepts_weights() {
                return Err(config_err!("timestep weights apply to e2 and e3 only, not {}", self.experiment));
            }
            if w.len() != self.schedule.steps {
                return Err(config_err!("{} weights for a {}-step schedule", w.len(), self.schedule.steps));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RecordRow {
    pub step: usize,
    /// Mean training loss since the previous row.
    pub loss: f64,
    pub val_iou: Option<f64>,
    pub val_ece: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunRecord {
    pub experiment: Experiment,
    pub rows: Vec<RecordRow>,
    pub wall_clock_secs: f64,
    pub checkpoint: Option<PathBuf>,
}

impl RunRecord {
    /// Columns step, loss, val_iou, val_ece; missing metrics are empty.
    pub fn to_csv(&self) -> String {
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        let mut out = String::from("step,loss,val_iou,val_ece\n");
        for r in &self.rows {
            out.push_str(&format!("{},{},{},{}\n", r.step, r.loss, opt(r.val_iou), opt(r.val_ece)));
        }
        out
    }

    pub fn first_loss(&self) -> Option<f64> {
        self.rows.first().map(|r| r.loss)
    }

    pub fn final_loss(&self) -> Option<f64> {
        self.rows.last().map(|r| r.loss)
    }

    pub fn final_val_iou(&self) -> Option<f64> {
        self.rows.iter().rev().find_map(|r| r.val_iou)
    }
}

#[derive(Debug, Clone)]
pub struct Trained {
    pub model: DenoiserModel,
    pub record: RunRecord,
}

fn mask01(batch: &[&MaskImagePair]) -> Result<Tensor> {
    let size = batch[0].size;
    let data = batch.iter().flat_map(|p| p.mask.iter().copied()).collect();
    Tensor::new(vec![batch.len(), 1, size, size], data)
}

/// Noisy inputs for one diffusion training step.
#[derive(Debug, Clone)]
pub struct DiffusionBatch {
    pub x0: Tensor,
    pub x_t: Tensor,
    pub eps: Tensor,
    pub t: Vec<usize>,
    pub y: Option<Tensor>,
}

/// Draws t and ε per sample and forms x_t from the chosen field.
pub fn diffusion_batch<R: Rng + ?Sized>(
    batch: &[&MaskImagePair],
    field: Field,
    conditioned: bool,
    sched: &DiffusionSchedule,
    rng: &mut R,
) -> Result<DiffusionBatch> {
    let x0 = stack_encoded(batch.iter().copied(), field)?;
    let t: Vec<usize> = (0..batch.len()).map(|_| sample_timestep(rng, sched.steps())).collect();
    let eps = Tensor::randn(x0.shape(), rng);
    let x_t = forward_sample(&x0, &t, &eps, sched)?;
    let y = if conditioned { Some(stack_encoded(batch.iter().copied(), Field::Image)?) } else { None };
    Ok(DiffusionBatch { x0, x_t, eps, t, y })
}

fn step_loss<R: Rng + ?Sized>(
    cfg: &TrainConfig,
    model: &DenoiserModel,
    g: &mut Graph,
    p: &BoundParams,
    batch: &[&MaskImagePair],
    sched: &DiffusionSchedule,
    rng: &mut R,
) -> Result<Var> {
    if cfg.experiment == Experiment::E1 {
        let y = g.constant(stack_encoded(batch.iter().copied(), Field::Image)?);
        let noise = g.constant(Tensor::randn(&[batch.len(), 1, cfg.model.size, cfg.model.size], rng));
        let logits = model.forward(g, p, noise, &vec![0; batch.len()], Some(y))?;
        return g.dice_ce_loss(logits, &mask01(batch)?, cfg.dice_mix);
    }
    let field = if cfg.experiment == Experiment::E4 { Field::Image } else { Field::Mask };
    let b = diffusion_batch(batch, field, cfg.experiment.conditioned(), sched, rng)?;
    let weights = cfg.weights.as_ref().map(|w| b.t.iter().map(|&t| w.get(t)).collect::<Result<Vec<_>>>()).transpose()?;
    let x_t = g.constant(b.x_t);
    let y = b.y.map(|y| g.constant(y));
    let out = model.forward(g, p, x_t, &b.t, y)?;
    let target = g.constant(if cfg.experiment == Experiment::E3 { b.x0 } else { b.eps });
    g.weighted_mse_loss(out, target, weights)
}

fn run(cfg: &TrainConfig, data: &Dataset, expected: Experiment) -> Result<Trained> {
    if cfg.experiment != expected {
        return Err(config_err!("config is for {}, not {expected}", cfg.experiment));
    }
    cfg.validate()?;
    if data.size != cfg.model.size {
        return Err(config_err!("data is {0}x{0} but the model expects {1}x{1}", data.size, cfg.model.size));
    }
    if data.train.is_empty() {
        return Err(data_err!("no training samples"));
    }
    let started = Instant::now();
    let sched = cfg.schedule.build()?;
    let mut init = ChaCha8Rng::seed_from_u64(mix_seed_str(cfg.seed, "init"));
    let mut model = DenoiserModel::build(cfg.model, cfg.experiment.target(), sched.steps(), &mut init)?
        .with_beta_range(cfg.schedule.beta_start, cfg.schedule.beta_end);
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed_str(cfg.seed, "train"));
    let adam = AdamConfig::with_lr(cfg.lr);
    let mut state = AdamState::new();
    let mut rows = Vec::new();
    let (mut acc, mut acc_n) = (0.0, 0usize);
    for step in 1..=cfg.steps {
        let batch: Vec<&MaskImagePair> = (0..cfg.batch_size).map(|_| &data.train[rng.gen_range(0..data.train.len())]).collect();
        let mut g = Graph::new();
        let p = model.bind(&mut g, true);
        let loss = step_loss(cfg, &model, &mut g, &p, &batch, &sched, &mut rng)?;
        let value = g.value(loss)[0];
        if !value.is_finite() {
            return Err(Error::State(format!("non-finite loss {value} at step {step}")));
        }
        g.backward(loss)?;
        for (v, t) in p.vars().iter().zip(model.params_mut()) {
            g.write_grad(*v, t)?;
        }
        adam_step(model.params_mut(), &adam, &mut state)?;
        acc += value;
        acc_n += 1;
        let last = step == cfg.steps;
        if step % cfg.log_every == 0 || last {
            let mut row = RecordRow { step, loss: acc / acc_n as f64, val_iou: None, val_ece: None };
            let due = cfg.eval_every > 0 && (step % cfg.eval_every == 0 || last);
            if due && !data.val.is_empty() && cfg.experiment.conditioned() {
                let n = if cfg.eval_samples == 0 { data.val.len() } else { cfg.eval_samples.min(data.val.len()) };
                let report = evaluate(&model, &data.val[..n], cfg.ensemble_n, &sched, mix_seed(mix_seed_str(cfg.seed, "eval"), step as u64))?;
                row.val_iou = Some(report.mean_iou);
                row.val_ece = Some(report.calibration.ece);
            }
            rows.push(row);
            acc = 0.0;
            acc_n = 0;
        }
    }
    let record = RunRecord { experiment: cfg.experiment, rows, wall_clock_secs: started.elapsed().as_secs_f64(), checkpoint: None };
    Ok(Trained { model, record })
}

/// Feed-forward segmentation (E1).
pub fn train_feedforward(cfg: &TrainConfig, data: &Dataset) -> Result<Trained> {
    run(cfg, data, Experiment::E1)
}

/// Conditional ε-prediction on masks (E2), optionally timestep-weighted.
pub fn train_diffusion_seg(cfg: &TrainConfig, data: &Dataset) -> Result<Trained> {
    run(cfg, data, Experiment::E2)
}

/// Unconditional x₀-prediction on masks (E3).
pub fn train_mask_recovery(cfg: &TrainConfig, data: &Dataset) -> Result<Trained> {
    run(cfg, data, Experiment::E3)
}

/// Unconditional ε-prediction on images (E4).
pub fn train_image_gen(cfg: &TrainConfig, data: &Dataset) -> Result<Trained> {
    run(cfg, data, Experiment::E4)
}

/// Dispatches on `cfg.experiment`.
pub fn train(cfg: &TrainConfig, data: &Dataset) -> Result<Trained> {
    run(cfg, data, cfg.experiment)
}

/// Ensemble statistics for one image; all maps are row-major `H×W`.
#[derive(Debug, Clone, PartialEq)]
pub struct EnsembleMap {
    pub mean: Vec<f64>,
    /// Population standard deviation over members.
    pub std: Vec<f64>,
    /// `mean > 0.5`.
    pub mask: Vec<f64>,
    /// Member predictions mapped to [0, 1].
    pub members: Vec<Vec<f64>>,
}

impl EnsembleMap {
    /// Mean and standard deviation of member maps, accumulated in member order.
    pub fn from_members(members: Vec<Vec<f64>>) -> Result<Self> {
        let first = members.first().ok_or_else(|| config_err!("an ensemble needs at least one member"))?;
        let len = first.len();
        if members.iter().any(|m| m.len() != len) {
            return Err(shape_err!("ensemble members differ in size"));
        }
        let n = members.len() as f64;
        let mut mean = vec![0.0; len];
        for m in &members {
            for (a, v) in mean.iter_mut().zip(m) {
                *a += v;
            }
        }
        mean.iter_mut().for_each(|a| *a /= n);
        let mut var = vec![0.0; len];
        for m in &members {
            for ((a, v), mu) in var.iter_mut().zip(m).zip(&mean) {
                *a += (v - mu) * (v - mu);
            }
        }
        let std = var.into_iter().map(|v| (v / n).sqrt()).collect();
        let mask = mean.iter().map(|&m| if m > 0.5 { 1.0 } else { 0.0 }).collect();
        Ok(EnsembleMap { mean, std, mask, members })
    }
}

/// Ensembled segmentation of a batch of encoded images `[B,1,H,W]`.
///
/// A logits model (E1) is run once per member with fresh noise input and
/// its sigmoid taken; an ε model (E2) is sampled with the DDPM chain and
/// its x̂₀ mapped from [-1, 1] to [0, 1]. All `B·n` members run as one batch.
pub fn ensemble_predict<R: Rng + ?Sized>(
    model: &DenoiserModel,
    images: &Tensor,
    n: usize,
    sched: &DiffusionSchedule,
    rng: &mut R,
) -> Result<Vec<EnsembleMap>> {
    if n == 0 {
        return Err(config_err!("ensemble size must be at least 1"));
    }
    let shape = images.shape();
    if shape.len() != 4 || shape[1] != 1 {
        return Err(shape_err!("expected [B,1,H,W] images, got {shape:?}"));
    }
    let (b, per) = (shape[0], images.len() / shape[0]);
    // member-major layout: copy k of image i sits at k·B + i
    let mut rep = Vec::with_capacity(n * images.len());
    for _ in 0..n {
        rep.extend_from_slice(images.data());
    }
    let rep_shape = [n * b, shape[1], shape[2], shape[3]];
    let y = Tensor::new(rep_shape.to_vec(), rep)?;
    let probs: Vec<f64> = match model.target() {
        Target::Logits => {
            let noise = Tensor::randn(&rep_shape, rng);
            let out = model.predict(&noise, &vec![0; n * b], Some(&y))?;
            out.data().iter().map(|z| 1.0 / (1.0 + (-z).exp())).collect()
        }
        Target::Eps => {
            let x0 = ddpm_sample(model, &rep_shape, Some(&y), sched, rng, Target::Eps)?;
            x0.data().iter().map(|v| ((v + 1.0) / 2.0).clamp(0.0, 1.0)).collect()
        }
        Target::X0 => return Err(config_err!("ensembles need a feed-forward (e1) or diffusion segmentation (e2) model")),
    };
    (0..b)
        .map(|i| {
            let members = (0..n).map(|k| probs[(k * b + i) * per..(k * b + i + 1) * per].to_vec()).collect();
            EnsembleMap::from_members(members)
        })
        .collect()
}

#[derive(Debug, Clone)]
pub struct EvalReport {
    pub ids: Vec<String>,
    pub ious: Vec<f64>,
    pub mean_iou: f64,
    /// Pooled over all pixels of all images, using the ensemble mean as probability.
    pub calibration: CalibrationReport,
    pub maps: Vec<EnsembleMap>,
}

impl EvalReport {
    /// Rows `id,iou`, then footer rows `mean_iou` and `ece`.
    pub fn summary_csv(&self) -> String {
        let mut out = String::from("id,iou\n");
        for (id, v) in self.ids.iter().zip(&self.ious) {
            out.push_str(&format!("{id},{v}\n"));
        }
        out.push_str(&format!("mean_iou,{}\n", self.mean_iou));
        out.push_str(&format!("ece,{}\n", self.calibration.ece));
        out
    }
}

/// Images per ensemble call, bounding the batch of a sampling chain.
const EVAL_CHUNK: usize = 8;

/// Ensembled IoU per image and pooled ECE over `pairs`.
pub fn evaluate(model: &DenoiserModel, pairs: &[MaskImagePair], n: usize, sched: &DiffusionSchedule, seed: u64) -> Result<EvalReport> {
    if pairs.is_empty() {
        return Err(data_err!("nothing to evaluate"));
    }
    if pairs[0].size != model.config().size {
        return Err(config_err!("data is {0}x{0} but the model expects {1}x{1}", pairs[0].size, model.config().size));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut maps = Vec::with_capacity(pairs.len());
    for chunk in pairs.chunks(EVAL_CHUNK) {
        let images = stack_encoded(chunk, Field::Image)?;
        maps.extend(ensemble_predict(model, &images, n, sched, &mut rng)?);
    }
    let ious = pairs.iter().zip(&maps).map(|(p, m)| iou(&m.mask, &p.mask)).collect::<Result<Vec<_>>>()?;
    let probs: Vec<f64> = maps.iter().flat_map(|m| m.mean.iter().copied()).collect();
    let gt: Vec<f64> = pairs.iter().flat_map(|p| p.mask.iter().copied()).collect();
    Ok(EvalReport {
        ids: pairs.iter().map(|p| p.id.clone()).collect(),
        mean_iou: ious.iter().sum::<f64>() / ious.len() as f64,
        ious,
        calibration: ece(&probs, &gt, ECE_BINS)?,
        maps,
    })
}
