//! Segmentation and calibration metrics, per-timestep profiles, the
//! per-pixel Bayes oracle and dataset fingerprints.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::{stack_encoded, Field, MaskImagePair};
use crate::diffusion::{epsilon_loss, forward_sample, predict_x0, weighted_mse, x0_loss, Denoiser, DiffusionSchedule, Target, TimestepWeights};
use crate::error::{config_err, data_err, format_err, shape_err, Result};
use crate::tensor::Tensor;

fn check_binary(name: &str, v: &[f64]) -> Result<()> {
    match v.iter().find(|&&x| x != 0.0 && x != 1.0) {
        Some(x) => Err(data_err!("{name} value {x} is not binary")),
        None => Ok(()),
    }
}

/// Intersection over union of two binary masks; 1.0 when both are empty.
pub fn iou(pred: &[f64], gt: &[f64]) -> Result<f64> {
    if pred.len() != gt.len() {
        return Err(shape_err!("iou of {} vs {} pixels", pred.len(), gt.len()));
    }
    check_binary("prediction", pred)?;
    check_binary("ground truth", gt)?;
    let (mut inter, mut union) = (0usize, 0usize);
    for (&p, &g) in pred.iter().zip(gt) {
        if p == 1.0 && g == 1.0 {
            inter += 1;
        }
        if p == 1.0 || g == 1.0 {
            union += 1;
        }
    }
    Ok(if union == 0 { 1.0 } else { inter as f64 / union as f64 })
}

pub const ECE_BINS: usize = 10;

#[derive(Debug, Clone, PartialEq)]
pub struct CalibrationBin {
    pub confidence: f64,
    pub accuracy: f64,
    pub count: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CalibrationReport {
    pub ece: f64,
    pub bins: Vec<CalibrationBin>,
}

/// Expected calibration error of a foreground-probability map.
///
/// Each pixel predicts foreground when `p >= 0.5` with confidence
/// `max(p, 1 − p)`; confidences are binned into equal-width bins over
/// [0.5, 1.0] and empty bins contribute nothing.
pub fn ece(prob: &[f64], gt: &[f64], bins: usize) -> Result<CalibrationReport> {
    if bins == 0 {
        return Err(config_err!("ece needs at least one bin"));
    }
    if prob.len() != gt.len() || prob.is_empty() {
        return Err(shape_err!("ece of {} probabilities vs {} labels", prob.len(), gt.len()));
    }
    check_binary("ground truth", gt)?;
    let mut conf_sum = vec![0.0; bins];
    let mut correct = vec![0usize; bins];
    let mut count = vec![0usize; bins];
    for (&p, &g) in prob.iter().zip(gt) {
        if !(0.0..=1.0).contains(&p) {
            return Err(data_err!("probability {p} outside [0, 1]"));
        }
        let predicted = if p >= 0.5 { 1.0 } else { 0.0 };
        let c = p.max(1.0 - p);
        let b = (((c - 0.5) / 0.5 * bins as f64) as usize).min(bins - 1);
        conf_sum[b] += c;
        count[b] += 1;
        if predicted == g {
            correct[b] += 1;
        }
    }
    let total = prob.len() as f64;
    let mut e = 0.0;
    let bins = (0..bins)
        .map(|b| {
            if count[b] == 0 {
                return CalibrationBin { confidence: 0.0, accuracy: 0.0, count: 0 };
            }
            let n = count[b] as f64;
            let (confidence, accuracy) = (conf_sum[b] / n, correct[b] as f64 / n);
            e += n / total * (accuracy - confidence).abs();
            CalibrationBin { confidence, accuracy, count: count[b] }
        })
        .collect();
    Ok(CalibrationReport { ece: e, bins })
}

/// A scalar curve over timesteps. `values` holds the current (possibly
/// smoothed) curve and `raw` the unsmoothed one.
#[derive(Debug, Clone, PartialEq)]
pub struct TimestepProfile {
    pub t_grid: Vec<usize>,
    pub raw: Vec<f64>,
    pub values: Vec<f64>,
    pub smoothing_window: usize,
    pub label: String,
}

impl TimestepProfile {
    pub fn new(label: impl Into<String>, t_grid: Vec<usize>, values: Vec<f64>) -> Result<Self> {
        if t_grid.len() != values.len() {
            return Err(shape_err!("{} timesteps vs {} values", t_grid.len(), values.len()));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(data_err!("profile values must be finite"));
        }
        Ok(TimestepProfile { t_grid, raw: values.clone(), values, smoothing_window: 1, label: label.into() })
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Columns t, value, smoothed_value.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("t,value,smoothed_value\n");
        for ((t, r), v) in self.t_grid.iter().zip(&self.raw).zip(&self.values) {
            out.push_str(&format!("{t},{r},{v}\n"));
        }
        out
    }

    /// Parses [`to_csv`](Self::to_csv) output; the smoothed column becomes
    /// `values`.
    pub fn from_csv(label: impl Into<String>, text: &str) -> Result<Self> {
        let rows: Vec<(usize, f64, f64)> = crate::csvio::read_rows(text, &["t", "value", "smoothed_value"], "profile csv")?;
        let t_grid: Vec<usize> = rows.iter().map(|r| r.0).collect();
        let raw: Vec<f64> = rows.iter().map(|r| r.1).collect();
        let values: Vec<f64> = rows.iter().map(|r| r.2).collect();
        if t_grid.is_empty() || t_grid.windows(2).any(|w| w[0] >= w[1]) {
            return Err(format_err!("profile timesteps must be non-empty and strictly increasing"));
        }
        if raw.iter().chain(&values).any(|v| !v.is_finite()) {
            return Err(format_err!("profile values must be finite"));
        }
        Ok(TimestepProfile { t_grid, raw, values, smoothing_window: 1, label: label.into() })
    }

    /// Value at the grid point nearest to `t`.
    pub fn value_near(&self, t: usize) -> f64 {
        let i = self.t_grid.iter().enumerate().min_by_key(|(_, &g)| g.abs_diff(t)).map_or(0, |(i, _)| i);
        self.values[i]
    }
}

/// Parses `a:b:s` (0-based indices a..=b with stride s) or a single index
/// into 1-based timesteps, e.g. `0:999:10` gives 1, 11, …, 991.
pub fn parse_t_grid(spec: &str, steps: usize) -> Result<Vec<usize>> {
    let parts: Vec<&str> = spec.split(':').map(str::trim).collect();
    let num = |s: &str| s.parse::<usize>().map_err(|_| config_err!("bad t_grid component '{s}' in '{spec}'"));
    let (a, b, s) = match parts[..] {
        [a] => (num(a)?, num(a)?, 1),
        [a, b] => (num(a)?, num(b)?, 1),
        [a, b, s] => (num(a)?, num(b)?, num(s)?),
        _ => return Err(config_err!("t_grid '{spec}' must look like start:end:stride")),
    };
    if s == 0 || a > b || b >= steps {
        return Err(config_err!("t_grid '{spec}' invalid for {steps} steps"));
    }
    Ok((a..=b).step_by(s).map(|i| i + 1).collect())
}

fn check_grid(t_grid: &[usize], sched: &DiffusionSchedule) -> Result<()> {
    if t_grid.is_empty() {
        return Err(config_err!("empty t_grid"));
    }
    if t_grid.windows(2).any(|w| w[0] >= w[1]) || t_grid[0] == 0 || *t_grid.last().unwrap() > sched.steps() {
        return Err(config_err!("t_grid must be strictly increasing within 1..={}", sched.steps()));
    }
    Ok(())
}

/// Fixed evaluation draws shared by every grid point: sample choices and
/// standard-normal noise.
struct EvalDraws {
    x0: Tensor,
    y: Tensor,
    eps: Tensor,
}

fn eval_draws(data: &[MaskImagePair], n_eval: usize, field: Field, seed: u64) -> Result<EvalDraws> {
    if data.is_empty() || n_eval == 0 {
        return Err(config_err!("profiling needs data and n_eval >= 1"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let picks: Vec<&MaskImagePair> = (0..n_eval).map(|_| &data[rng.gen_range(0..data.len())]).collect();
    let x0 = stack_encoded(picks.iter().copied(), field)?;
    let y = stack_encoded(picks.iter().copied(), Field::Image)?;
    let eps = Tensor::randn(x0.shape(), &mut rng);
    Ok(EvalDraws { x0, y, eps })
}

/// Mean squared error of the clamped x̂₀ against the encoded mask, per
/// timestep. ε-models are converted through the closed form.
pub fn profile_mask_error(
    model: &dyn Denoiser,
    data: &[MaskImagePair],
    sched: &DiffusionSchedule,
    t_grid: &[usize],
    conditioned: bool,
    n_eval: usize,
    seed: u64,
) -> Result<TimestepProfile> {
    check_grid(t_grid, sched)?;
    let d = eval_draws(data, n_eval, Field::Mask, seed)?;
    let y = conditioned.then_some(&d.y);
    let values = t_grid
        .iter()
        .map(|&t| {
            let ts = vec![t; n_eval];
            let x_t = forward_sample(&d.x0, &ts, &d.eps, sched)?;
            let x0_hat = predict_x0(model, &x_t, &ts, y, sched)?;
            weighted_mse(&x0_hat, &d.x0, None)
        })
        .collect::<Result<Vec<_>>>()?;
    let label = if conditioned { "conditioned" } else { "unconditioned" };
    TimestepProfile::new(label, t_grid.to_vec(), values)
}

/// The three training objectives, named by what they train.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Objective {
    /// ε-prediction on images, unconditioned.
    ImageGeneration,
    /// x₀-prediction on masks, unconditioned.
    MaskRecovery,
    /// ε-prediction on masks conditioned on the image.
    DiffusionSegmentation,
}

impl Objective {
    pub fn as_str(self) -> &'static str {
        match self {
            Objective::ImageGeneration => "image_generation",
            Objective::MaskRecovery => "mask_recovery",
            Objective::DiffusionSegmentation => "diffusion_segmentation",
        }
    }

    fn target(self) -> Target {
        match self {
            Objective::MaskRecovery => Target::X0,
            _ => Target::Eps,
        }
    }
}

/// The training objective evaluated at each fixed timestep.
pub fn profile_training_loss(
    model: &dyn Denoiser,
    data: &[MaskImagePair],
    objective: Objective,
    sched: &DiffusionSchedule,
    t_grid: &[usize],
    n_eval: usize,
    seed: u64,
) -> Result<TimestepProfile> {
    check_grid(t_grid, sched)?;
    if model.target() != objective.target() {
        return Err(config_err!("{} loss needs a {} model", objective.as_str(), objective.target().as_str()));
    }
    let field = if objective == Objective::ImageGeneration { Field::Image } else { Field::Mask };
    let d = eval_draws(data, n_eval, field, seed)?;
    let values = t_grid
        .iter()
        .map(|&t| {
            let ts = vec![t; n_eval];
            match objective {
                Objective::ImageGeneration => epsilon_loss(model, &d.x0, None, &ts, &d.eps, sched, None),
                Objective::DiffusionSegmentation => epsilon_loss(model, &d.x0, Some(&d.y), &ts, &d.eps, sched, None),
                Objective::MaskRecovery => x0_loss(model, &d.x0, &ts, &d.eps, sched, None),
            }
        })
        .collect::<Result<Vec<_>>>()?;
    TimestepProfile::new(objective.as_str(), t_grid.to_vec(), values)
}

pub const DEFAULT_SMOOTHING_WINDOW: usize = 51;

/// Centered moving average over grid points, truncated at the edges.
pub fn smooth(profile: &TimestepProfile, window: usize) -> Result<TimestepProfile> {
    if window % 2 == 0 {
        return Err(config_err!("smoothing window {window} must be odd"));
    }
    if window > profile.len() {
        return Err(config_err!("smoothing window {window} exceeds profile length {}", profile.len()));
    }
    let half = window / 2;
    let n = profile.len();
    let v = &profile.values;
    let values = (0..n)
        .map(|i| {
            let (lo, hi) = (i.saturating_sub(half), (i + half).min(n - 1));
            v[lo..=hi].iter().sum::<f64>() / (hi - lo + 1) as f64
        })
        .collect();
    Ok(TimestepProfile { values, smoothing_window: window, ..profile.clone() })
}

/// Gauss–Legendre nodes and weights on [-1, 1].
fn gauss_legendre(n: usize) -> (Vec<f64>, Vec<f64>) {
    let mut x = vec![0.0; n];
    let mut w = vec![0.0; n];
    for i in 0..n.div_ceil(2) {
        let mut z = (std::f64::consts::PI * (i as f64 + 0.75) / (n as f64 + 0.5)).cos();
        let mut dp = 0.0;
        for _ in 0..100 {
            let (mut p0, mut p1) = (1.0, z);
            for k in 2..=n {
                let p2 = ((2 * k - 1) as f64 * z * p1 - (k - 1) as f64 * p0) / k as f64;
                p0 = p1;
                p1 = p2;
            }
            dp = n as f64 * (z * p1 - p0) / (z * z - 1.0);
            let dz = p1 / dp;
            z -= dz;
            if dz.abs() < 1e-15 {
                break;
            }
        }
        if n == 1 {
            dp = 1.0;
            z = 0.0;
        }
        x[i] = -z;
        x[n - 1 - i] = z;
        let wi = 2.0 / ((1.0 - z * z) * dp * dp);
        w[i] = wi;
        w[n - 1 - i] = wi;
    }
    (x, w)
}

const MMSE_PANELS: usize = 24;
const MMSE_NODES: usize = 32;
const MMSE_RANGE: f64 = 12.0;

/// Minimum mean-squared error for one pixel `x₀ ∈ {−1, +1}` with
/// `P(x₀ = +1) = prior_p`, observed as `√ᾱ·x₀ + √(1−ᾱ)·ε`.
///
/// The posterior mean is `tanh(½·logit(p) + √ᾱ·x/(1−ᾱ))`. The expected
/// squared error is integrated over each mixture component of the x_t
/// marginal with composite Gauss–Legendre quadrature (768 nodes).
pub fn bayes_mmse_at(prior_p: f64, alpha_bar: f64) -> Result<f64> {
    if !(prior_p > 0.0 && prior_p < 1.0) {
        return Err(config_err!("prior {prior_p} must lie in (0, 1)"));
    }
    if !(0.0..=1.0).contains(&alpha_bar) {
        return Err(config_err!("alpha_bar {alpha_bar} must lie in [0, 1]"));
    }
    let var = 1.0 - alpha_bar;
    if var <= 0.0 {
        return Ok(0.0);
    }
    let (a, s) = (alpha_bar.sqrt(), var.sqrt());
    let h = 0.5 * (prior_p / (1.0 - prior_p)).ln();
    let (nodes, weights) = gauss_legendre(MMSE_NODES);
    let panel = 2.0 * MMSE_RANGE / MMSE_PANELS as f64;
    let norm = 1.0 / (2.0 * std::f64::consts::PI).sqrt();
    let mut total = 0.0;
    for (x0, px0) in [(1.0, prior_p), (-1.0, 1.0 - prior_p)] {
        let mut acc = 0.0;
        for k in 0..MMSE_PANELS {
            let mid = -MMSE_RANGE + (k as f64 + 0.5) * panel;
            for (u, wu) in nodes.iter().zip(&weights) {
                let e = mid + 0.5 * panel * u;
                let z = h + a * (a * x0 + s * e) / var;
                // x0 − tanh(z) without cancellation
                let err = if x0 > 0.0 { 2.0 / (1.0 + (2.0 * z).exp()) } else { -2.0 / (1.0 + (-2.0 * z).exp()) };
                acc += wu * 0.5 * panel * norm * (-0.5 * e * e).exp() * err * err;
            }
        }
        total += px0 * acc;
    }
    Ok(total)
}

/// [`bayes_mmse_at`] at timestep `t` of `sched` (`t = 0` is noiseless).
pub fn bayes_pixel_mmse(prior_p: f64, sched: &DiffusionSchedule, t: usize) -> Result<f64> {
    bayes_mmse_at(prior_p, sched.alpha_bar(t)?)
}

/// Per-profile fingerprint statistics.
#[derive(Debug, Clone, PartialEq)]
pub struct FingerprintEntry {
    pub label: String,
    pub t_half: usize,
    pub converged: bool,
    pub terminal_value: f64,
    /// Relative change over the last tenth of the grid, from a least-squares fit.
    pub tail_change: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FingerprintSummary {
    pub entries: Vec<FingerprintEntry>,
    /// Labels ordered by increasing t_half.
    pub ordering: Vec<String>,
}

/// A tail whose fitted relative change stays below this counts as converged.
pub const CONVERGENCE_TOLERANCE: f64 = 0.02;

impl FingerprintSummary {
    /// Columns kind, t_half, converged, terminal_value.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("kind,t_half,converged,terminal_value\n");
        for e in &self.entries {
            out.push_str(&format!("{},{},{},{}\n", e.label, e.t_half, e.converged, e.terminal_value));
        }
        out
    }

    pub fn get(&self, label: &str) -> Option<&FingerprintEntry> {
        self.entries.iter().find(|e| e.label == label)
    }

    pub fn ordering_string(&self) -> String {
        self.ordering.join(" < ")
    }
}

fn fingerprint_entry(p: &TimestepProfile) -> FingerprintEntry {
    let terminal = *p.values.last().expect("non-empty profile");
    let t_half = p.t_grid.iter().zip(&p.values).find(|(_, &v)| v >= 0.5 * terminal).map_or(p.t_grid[p.len() - 1], |(t, _)| *t);
    let tail = (p.len() as f64 * 0.1).ceil().max(2.0) as usize;
    let tail = tail.min(p.len());
    let ts: Vec<f64> = p.t_grid[p.len() - tail..].iter().map(|&t| t as f64).collect();
    let vs = &p.values[p.len() - tail..];
    let tail_change = if tail < 2 {
        0.0
    } else {
        let mt = ts.iter().sum::<f64>() / tail as f64;
        let mv = vs.iter().sum::<f64>() / tail as f64;
        let sxy: f64 = ts.iter().zip(vs).map(|(t, v)| (t - mt) * (v - mv)).sum();
        let sxx: f64 = ts.iter().map(|t| (t - mt).powi(2)).sum();
        let slope = sxy / sxx;
        slope * (ts[tail - 1] - ts[0]) / terminal.abs().max(1e-12)
    };
    FingerprintEntry {
        label: p.label.clone(),
        t_half,
        converged: tail_change.abs() < CONVERGENCE_TOLERANCE,
        terminal_value: terminal,
        tail_change,
    }
}

/// Half-rise timestep, tail convergence and t_half ordering of profiles
/// that share one grid.
pub fn fingerprint(profiles: &[TimestepProfile]) -> Result<FingerprintSummary> {
    let first = profiles.first().ok_or_else(|| config_err!("fingerprint needs at least one profile"))?;
    if first.is_empty() {
        return Err(config_err!("empty profile"));
    }
    if profiles.iter().any(|p| p.t_grid != first.t_grid) {
        return Err(config_err!("fingerprint profiles must share one t_grid"));
    }
    let entries: Vec<FingerprintEntry> = profiles.iter().map(fingerprint_entry).collect();
    let mut order: Vec<&FingerprintEntry> = entries.iter().collect();
    order.sort_by_key(|e| e.t_half);
    let ordering = order.iter().map(|e| e.label.clone()).collect();
    Ok(FingerprintSummary { entries, ordering })
}

pub const DEFAULT_WEIGHT_FLOOR: f64 = 0.05;

/// Loss weights from the positive part of a profile's forward difference.
///
/// The clipped slope is rescaled to mean 1 over the grid, `floor` is added,
/// the result is interpolated linearly onto timesteps `1..=steps` (held
/// constant beyond the grid ends) and normalized to mean 1.
pub fn derivative_weights(profile: &TimestepProfile, floor: f64, steps: usize) -> Result<TimestepWeights> {
    let n = profile.len();
    if n < 2 {
        return Err(config_err!("derivative weights need a profile of length >= 2"));
    }
    if !(floor > 0.0 && floor.is_finite()) {
        return Err(config_err!("weight floor {floor} must be positive"));
    }
    if steps == 0 {
        return Err(config_err!("weights need at least one timestep"));
    }
    let (t, v) = (&profile.t_grid, &profile.values);
    let mut slope: Vec<f64> = (0..n - 1).map(|i| ((v[i + 1] - v[i]) / (t[i + 1] - t[i]) as f64).max(0.0)).collect();
    slope.push(slope[n - 2]);
    let mean = slope.iter().sum::<f64>() / n as f64;
    let raw: Vec<f64> = slope.iter().map(|s| if mean > 0.0 { s / mean } else { 0.0 } + floor).collect();
    let dense = (1..=steps)
        .map(|ts| {
            let j = t.partition_point(|&g| g < ts);
            if j == 0 {
                raw[0]
            } else if j == n {
                raw[n - 1]
            } else {
                let f = (ts - t[j - 1]) as f64 / (t[j] - t[j - 1]) as f64;
                raw[j - 1] + f * (raw[j] - raw[j - 1])
            }
        })
        .collect();
    TimestepWeights::new(dense)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffusion::linear_schedule;
    use rand_distr::{Distribution, StandardNormal};

    fn profile(values: Vec<f64>) -> TimestepProfile {
        TimestepProfile::new("p", (1..=values.len()).collect(), values).unwrap()
    }

    #[test]
    fn iou_examples() {
        let a = [1.0, 1.0, 0.0, 0.0];
        assert_eq!(iou(&a, &a).unwrap(), 1.0);
        assert_eq!(iou(&[1.0, 0.0], &[0.0, 1.0]).unwrap(), 0.0);
        assert_eq!(iou(&[0.0; 3], &[0.0; 3]).unwrap(), 1.0);
        let pred = [1.0, 1.0, 1.0, 1.0, 0.0, 0.0, 0.0, 0.0];
        let gt = [0.0, 0.0, 1.0, 1.0, 1.0, 1.0, 0.0, 0.0];
        assert_eq!(iou(&pred, &gt).unwrap(), 2.0 / 6.0);
        assert_eq!(iou(&pred, &gt).unwrap(), iou(&gt, &pred).unwrap());
        assert!(iou(&[0.5], &[1.0]).is_err());
    }

    #[test]
    fn ece_examples() {
        let r = ece(&[1.0; 4], &[1.0; 4], ECE_BINS).unwrap();
        assert_eq!(r.ece, 0.0);
        assert_eq!(r.bins.iter().map(|b| b.count).sum::<usize>(), 4);
        assert_eq!(ece(&[1.0; 4], &[1.0, 0.0, 1.0, 0.0], ECE_BINS).unwrap().ece, 0.5);
        let gt: Vec<f64> = (0..10).map(|i| if i < 7 { 1.0 } else { 0.0 }).collect();
        assert!(ece(&[0.7; 10], &gt, ECE_BINS).unwrap().ece.abs() < 1e-12);
        assert!(ece(&[1.2], &[1.0], ECE_BINS).is_err());
        assert!(ece(&[0.2], &[1.0], 0).is_err());
    }

    #[test]
    fn ece_is_permutation_invariant_and_bounded() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let p: Vec<f64> = (0..200).map(|_| rng.gen()).collect();
        let g: Vec<f64> = (0..200).map(|_| if rng.gen_bool(0.4) { 1.0 } else { 0.0 }).collect();
        let base = ece(&p, &g, ECE_BINS).unwrap().ece;
        let (rp, rg): (Vec<f64>, Vec<f64>) = p.iter().zip(&g).rev().map(|(a, b)| (*a, *b)).unzip();
        assert!((ece(&rp, &rg, ECE_BINS).unwrap().ece - base).abs() < 1e-12);
        assert!((0.0..=1.0).contains(&base));
    }

    #[test]
    fn smoothing_examples() {
        let p = profile(vec![3.0, 1.0, 4.0, 1.0, 5.0]);
        assert_eq!(smooth(&p, 1).unwrap().values, p.values);
        let c = profile(vec![2.5; 9]);
        assert_eq!(smooth(&c, 5).unwrap().values, c.values);
        let mut imp = vec![0.0; 11];
        imp[5] = 1.0;
        let s = smooth(&profile(imp), 5).unwrap();
        for i in 3..=7 {
            assert!((s.values[i] - 0.2).abs() < 1e-15);
        }
        assert_eq!(s.values[2], 0.0);
        assert!(s.values.iter().all(|v| (0.0..=1.0).contains(v)));
        assert!(smooth(&p, 4).is_err());
        assert!(smooth(&p, 7).is_err());
    }

    #[test]
    fn t_grid_parsing() {
        let g = parse_t_grid("0:999:10", 1000).unwrap();
        assert_eq!(g.len(), 100);
        assert_eq!((g[0], g[99]), (1, 991));
        assert_eq!(parse_t_grid("4", 10).unwrap(), vec![5]);
        assert!(parse_t_grid("0:1000:1", 1000).is_err());
        assert!(parse_t_grid("0:9:0", 10).is_err());
        assert!(parse_t_grid("a:b", 10).is_err());
    }

    #[test]
    fn profile_csv_roundtrip() {
        let p = smooth(&profile(vec![0.1, 0.25, 0.3]), 3).unwrap();
        let back = TimestepProfile::from_csv("p", &p.to_csv()).unwrap();
        assert_eq!(back.raw, p.raw);
        assert_eq!(back.values, p.values);
        assert!(TimestepProfile::from_csv("p", "t,value\n1,2\n").is_err());
        assert!(TimestepProfile::from_csv("p", "t,value,smoothed_value\n1,x,2\n").is_err());
    }

    #[test]
    fn gauss_legendre_integrates_polynomials() {
        let (x, w) = gauss_legendre(32);
        for k in 0..20 {
            let q: f64 = x.iter().zip(&w).map(|(x, w)| w * x.powi(k)).sum();
            let exact = if k % 2 == 1 { 0.0 } else { 2.0 / (k + 1) as f64 };
            assert!((q - exact).abs() < 1e-13, "x^{k}: {q}");
        }
    }

    #[test]
    fn mmse_limits() {
        for p in [0.1, 0.5, 0.8] {
            assert_eq!(bayes_mmse_at(p, 1.0).unwrap(), 0.0);
            let pure = bayes_mmse_at(p, 0.0).unwrap();
            assert!((pure - 4.0 * p * (1.0 - p)).abs() < 1e-3, "p {p}: {pure}");
        }
        assert!(bayes_mmse_at(0.0, 0.5).is_err());
        assert!(bayes_mmse_at(1.0, 0.5).is_err());
    }

    #[test]
    fn mmse_monotone_over_schedule() {
        let sched = linear_schedule(1000, 1e-4, 0.02).unwrap();
        for p in [0.05, 0.3, 0.5] {
            let mut prev = 0.0;
            for t in 0..=1000 {
                let m = bayes_pixel_mmse(p, &sched, t).unwrap();
                assert!(m >= prev - 1e-12, "p {p} t {t}");
                prev = m;
            }
        }
    }

    #[test]
    fn mmse_matches_monte_carlo() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for (p, ab) in [(0.3f64, 0.2f64), (0.5, 0.05)] {
            let (a, s) = (f64::sqrt(ab), f64::sqrt(1.0 - ab));
            let logit = (p / (1.0 - p)).ln();
            let n = 1_000_000;
            let mut acc = 0.0;
            for _ in 0..n {
                let x0 = if rng.gen_bool(p) { 1.0 } else { -1.0 };
                let e: f64 = StandardNormal.sample(&mut rng);
                let x = a * x0 + s * e;
                // posterior P(+1 | x) from the two Gaussian likelihoods
                let lp = -(x - a).powi(2) / (2.0 * s * s);
                let lm = -(x + a).powi(2) / (2.0 * s * s);
                let post = 1.0 / (1.0 + (lm - lp - logit).exp());
                let mean = 2.0 * post - 1.0;
                acc += (x0 - mean).powi(2);
            }
            let mc = acc / n as f64;
            let quad = bayes_mmse_at(p, ab).unwrap();
            assert!((quad - mc).abs() / mc < 0.01, "p {p} ab {ab}: quad {quad} mc {mc}");
        }
    }

    #[test]
    fn fingerprint_examples() {
        let lin = profile((1..=1000).map(|t| t as f64).collect());
        let f = fingerprint(&[lin]).unwrap();
        assert_eq!(f.entries[0].t_half, 500);
        assert!(!f.entries[0].converged);

        let flat_tail = profile((1..=100).map(|t| (t as f64 / 20.0).min(1.0)).collect());
        let f = fingerprint(&[flat_tail]).unwrap();
        assert!(f.entries[0].converged);
        assert_eq!(f.entries[0].t_half, 10);

        let mut a = profile((1..=10).map(|t| (t as f64 / 3.0).min(1.0)).collect());
        a.label = "fast".into();
        let mut b = profile((1..=10).map(|t| t as f64).collect());
        b.label = "slow".into();
        let f = fingerprint(&[b.clone(), a]).unwrap();
        assert_eq!(f.ordering, vec!["fast", "slow"]);
        assert!(f.to_csv().starts_with("kind,t_half,converged,terminal_value\nslow,5,false,10\n"));

        let mut c = b.clone();
        c.t_grid[0] = 0;
        assert!(fingerprint(&[b, c]).is_err());
    }

    #[test]
    fn derivative_weight_examples() {
        let lin = profile((1..=50).map(|t| 0.3 * t as f64).collect());
        let w = derivative_weights(&lin, DEFAULT_WEIGHT_FLOOR, 50).unwrap();
        assert!(w.as_slice().iter().all(|x| (x - 1.0).abs() < 1e-12));

        let flat = profile(vec![0.4; 20]);
        let w = derivative_weights(&flat, DEFAULT_WEIGHT_FLOOR, 20).unwrap();
        assert!(w.as_slice().iter().all(|x| (x - 1.0).abs() < 1e-12));

        assert!(derivative_weights(&profile(vec![1.0]), 0.05, 1).is_err());
        assert!(derivative_weights(&lin, 0.0, 50).is_err());
    }

    #[test]
    fn derivative_weights_concentrate_on_transition() {
        let n = 200;
        let sig = profile((1..=n).map(|t| 1.0 / (1.0 + (-(t as f64 - 100.0) / 8.0).exp())).collect());
        let w = derivative_weights(&sig, DEFAULT_WEIGHT_FLOOR, n).unwrap();
        assert!((w.mean() - 1.0).abs() < 1e-9);
        // recompute directly from the forward differences
        let v = &sig.values;
        let mut d: Vec<f64> = (0..n - 1).map(|i| (v[i + 1] - v[i]).max(0.0)).collect();
        d.push(d[n - 2]);
        let m = d.iter().sum::<f64>() / n as f64;
        let raw: Vec<f64> = d.iter().map(|x| x / m + DEFAULT_WEIGHT_FLOOR).collect();
        let rm = raw.iter().sum::<f64>() / n as f64;
        for (a, b) in w.as_slice().iter().zip(&raw) {
            assert!((a - b / rm).abs() < 1e-9);
        }
        let central: f64 = w.as_slice()[75..125].iter().sum();
        assert!(central > 0.8 * n as f64, "central mass {central}");
        assert!(w.as_slice()[0] < 0.2 && w.as_slice()[n - 1] < 0.2);
    }

    #[test]
    fn sparse_grid_weights_interpolate() {
        let p = TimestepProfile::new("p", vec![1, 11, 21], vec![0.0, 1.0, 1.0]).unwrap();
        let w = derivative_weights(&p, 0.05, 30).unwrap();
        assert_eq!(w.len(), 30);
        assert!(w.as_slice()[0] > w.as_slice()[20]);
        assert!((w.as_slice()[25] - w.as_slice()[29]).abs() < 1e-15);
    }
}
