//! Noise schedules, the Gaussian forward process, training objectives and
//! ancestral DDPM sampling.
//!
//! Timesteps are 1-based throughout: `t = 1` is the least noisy step and
//! `t = T` the noisiest. Masks and images are encoded to `[-1, 1]` before
//! diffusion.

use rand::Rng;

use crate::error::{config_err, format_err, shape_err, Error, Result};
use crate::tensor::Tensor;

/// Per-timestep β, α = 1 − β and cumulative ᾱ.
#[derive(Clone, Debug, PartialEq)]
pub struct DiffusionSchedule {
    betas: Vec<f64>,
    alphas: Vec<f64>,
    alpha_bars: Vec<f64>,
}

pub const DEFAULT_STEPS: usize = 1000;
pub const DEFAULT_BETA_START: f64 = 1e-4;
pub const DEFAULT_BETA_END: f64 = 0.02;

/// Linearly spaced β from `beta_start` to `beta_end`, both inclusive.
pub fn linear_schedule(steps: usize, beta_start: f64, beta_end: f64) -> Result<DiffusionSchedule> {
    if steps < 2 {
        return Err(config_err!("linear schedule needs at least 2 steps, got {steps}"));
    }
    if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
        return Err(config_err!("need 0 < beta_start <= beta_end < 1, got {beta_start}, {beta_end}"));
    }
    let span = beta_end - beta_start;
    let betas = (0..steps).map(|i| beta_start + span * i as f64 / (steps - 1) as f64).collect();
    DiffusionSchedule::from_betas(betas)
}

impl Default for DiffusionSchedule {
    fn default() -> Self {
        linear_schedule(DEFAULT_STEPS, DEFAULT_BETA_START, DEFAULT_BETA_END).expect("default schedule valid")
    }
}

impl DiffusionSchedule {
    /// Builds a schedule from explicit β values, each in `(0, 1)`.
    pub fn from_betas(betas: Vec<f64>) -> Result<Self> {
        if betas.is_empty() {
            return Err(config_err!("schedule needs at least one step"));
        }
        if let Some(b) = betas.iter().find(|b| !(**b > 0.0 && **b < 1.0)) {
            return Err(config_err!("beta {b} outside (0, 1)"));
        }
        let alphas: Vec<f64> = betas.iter().map(|b| 1.0 - b).collect();
        let mut alpha_bars = Vec::with_capacity(betas.len());
        let mut acc = 1.0;
        for a in &alphas {
            acc *= a;
            alpha_bars.push(acc);
        }
        Ok(DiffusionSchedule { betas, alphas, alpha_bars })
    }

    pub fn steps(&self) -> usize {
        self.betas.len()
    }

    pub fn betas(&self) -> &[f64] {
        &self.betas
    }

    pub fn alphas(&self) -> &[f64] {
        &self.alphas
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bars
    }

    fn check(&self, t: usize) -> Result<usize> {
        if t == 0 || t > self.steps() {
            return Err(config_err!("timestep {t} outside 1..={}", self.steps()));
        }
        Ok(t - 1)
    }

    pub fn beta(&self, t: usize) -> Result<f64> {
        Ok(self.betas[self.check(t)?])
    }

    pub fn alpha(&self, t: usize) -> Result<f64> {
        Ok(self.alphas[self.check(t)?])
    }

    /// ᾱ_t; `alpha_bar(0)` is 1 by convention.
    pub fn alpha_bar(&self, t: usize) -> Result<f64> {
        if t == 0 {
            return Ok(1.0);
        }
        Ok(self.alpha_bars[self.check(t)?])
    }

    /// Schedule dump with columns `t,beta,alpha,alpha_bar`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("t,beta,alpha,alpha_bar\n");
        for i in 0..self.steps() {
            out.push_str(&format!("{},{},{},{}\n", i + 1, self.betas[i], self.alphas[i], self.alpha_bars[i]));
        }
        out
    }
}

/// Non-negative per-timestep loss weights with mean 1.
#[derive(Clone, Debug, PartialEq)]
pub struct TimestepWeights {
    weights: Vec<f64>,
}

impl TimestepWeights {
    /// Normalizes `raw` to mean 1.
    pub fn new(raw: Vec<f64>) -> Result<Self> {
        if raw.is_empty() {
            return Err(config_err!("empty weight vector"));
        }
        if raw.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(Error::Data("weights must be finite and non-negative".into()));
        }
        let mean = raw.iter().sum::<f64>() / raw.len() as f64;
        if mean <= 0.0 {
            return Err(Error::Data("weights must not all be zero".into()));
        }
        Ok(TimestepWeights { weights: raw.into_iter().map(|w| w / mean).collect() })
    }

    pub fn uniform(steps: usize) -> Self {
        TimestepWeights { weights: vec![1.0; steps] }
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.weights
    }

    /// Weight of 1-based timestep `t`.
    pub fn get(&self, t: usize) -> Result<f64> {
        if t == 0 || t > self.weights.len() {
            return Err(config_err!("timestep {t} outside weight table of {}", self.weights.len()));
        }
        Ok(self.weights[t - 1])
    }

    pub fn mean(&self) -> f64 {
        self.weights.iter().sum::<f64>() / self.weights.len() as f64
    }

    /// CSV with header `t,weight`, one row per timestep.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("t,weight\n");
        for (i, w) in self.weights.iter().enumerate() {
            out.push_str(&format!("{},{w}\n", i + 1));
        }
        out
    }

    /// Parses [`to_csv`](Self::to_csv) output; rows must cover `1..=T` in
    /// order and already have mean 1.
    pub fn from_csv(text: &str) -> Result<Self> {
        let rows: Vec<(usize, f64)> = crate::csvio::read_rows(text, &["t", "weight"], "weights csv")?;
        if let Some((i, (t, _))) = rows.iter().enumerate().find(|(i, (t, _))| *t != i + 1) {
            return Err(format_err!("weights row {}: timestep {t} out of order", i + 1));
        }
        let weights: Vec<f64> = rows.into_iter().map(|(_, w)| w).collect();
        if weights.is_empty() {
            return Err(format_err!("weights csv has no rows"));
        }
        let mean = weights.iter().sum::<f64>() / weights.len() as f64;
        if (mean - 1.0).abs() > 1e-9 {
            return Err(format_err!("weights mean {mean} is not 1"));
        }
        if weights.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(format_err!("weights must be finite and non-negative"));
        }
        Ok(TimestepWeights { weights })
    }
}

/// What a denoiser's output estimates.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Target {
    /// The added noise ε.
    Eps,
    /// The clean signal x₀.
    X0,
    /// Segmentation logits (feed-forward training).
    Logits,
}

impl Target {
    pub fn as_str(self) -> &'static str {
        match self {
            Target::Eps => "eps",
            Target::X0 => "x0",
            Target::Logits => "logits",
        }
    }
}

/// Anything that maps a noisy batch `[B,1,H,W]`, per-sample timesteps and an
/// optional condition batch to a same-shaped prediction.
pub trait Denoiser {
    fn target(&self) -> Target;
    fn predict(&self, x_t: &Tensor, t: &[usize], y: Option<&Tensor>) -> Result<Tensor>;
}

/// `{0,1}` or `[0,1]` values to `[-1,1]`.
pub fn encode_unit(x: &Tensor) -> Tensor {
    x.map(|v| 2.0 * v - 1.0)
}

/// `[-1,1]` values back to `[0,1]`, clamped.
pub fn decode_unit(x: &Tensor) -> Tensor {
    x.map(|v| ((v + 1.0) / 2.0).clamp(0.0, 1.0))
}

/// Binary mask from an encoded prediction, thresholded at 0.
pub fn decode_mask(x: &Tensor) -> Tensor {
    x.map(|v| if v > 0.0 { 1.0 } else { 0.0 })
}

fn per_sample(shape: &[usize], t: &[usize]) -> Result<usize> {
    let batch = *shape.first().ok_or_else(|| shape_err!("expected a batch tensor"))?;
    if t.len() != batch {
        return Err(shape_err!("{} timesteps for batch of {batch}", t.len()));
    }
    Ok(crate::tensor::numel(&shape[1..]))
}

/// Applies `f(value_a, value_b, t)` per element with the sample's timestep.
fn per_timestep(
    a: &Tensor,
    b: &Tensor,
    t: &[usize],
    f: impl Fn(f64, f64, usize) -> f64,
) -> Result<Tensor> {
    if a.shape() != b.shape() {
        return Err(shape_err!("shape mismatch {:?} vs {:?}", a.shape(), b.shape()));
    }
    let per = per_sample(a.shape(), t)?;
    let data = a
        .data()
        .iter()
        .zip(b.data())
        .enumerate()
        .map(|(i, (&x, &y))| f(x, y, t[i / per]))
        .collect();
    Tensor::new(a.shape().to_vec(), data)
}

fn checked(sched: &DiffusionSchedule, t: &[usize]) -> Result<()> {
    for &ti in t {
        sched.check(ti)?;
    }
    Ok(())
}

/// Closed-form `x_t = √ᾱ_t·x₀ + √(1−ᾱ_t)·ε`, one timestep per batch sample.
pub fn forward_sample(x0: &Tensor, t: &[usize], eps: &Tensor, sched: &DiffusionSchedule) -> Result<Tensor> {
    checked(sched, t)?;
    per_timestep(x0, eps, t, |x, e, ti| {
        let ab = sched.alpha_bars[ti - 1];
        ab.sqrt() * x + (1.0 - ab).sqrt() * e
    })
}

/// Inverts the forward process for x₀ given a noise estimate.
pub fn eps_to_x0(x_t: &Tensor, eps_hat: &Tensor, t: &[usize], sched: &DiffusionSchedule) -> Result<Tensor> {
    checked(sched, t)?;
    for &ti in t {
        if sched.alpha_bars[ti - 1] <= 0.0 {
            return Err(Error::Singularity(format!("alpha_bar is zero at t={ti}")));
        }
    }
    per_timestep(x_t, eps_hat, t, |x, e, ti| {
        let ab = sched.alpha_bars[ti - 1];
        (x - (1.0 - ab).sqrt() * e) / ab.sqrt()
    })
}

/// Inverts the forward process for ε given a clean-signal estimate.
pub fn x0_to_eps(x_t: &Tensor, x0_hat: &Tensor, t: &[usize], sched: &DiffusionSchedule) -> Result<Tensor> {
    checked(sched, t)?;
    for &ti in t {
        if sched.alpha_bars[ti - 1] >= 1.0 {
            return Err(Error::Singularity(format!("1 - alpha_bar is zero at t={ti}")));
        }
    }
    per_timestep(x_t, x0_hat, t, |x, x0, ti| {
        let ab = sched.alpha_bars[ti - 1];
        (x - ab.sqrt() * x0) / (1.0 - ab).sqrt()
    })
}

/// Per-sample weighted mean squared error, matching
/// [`Graph::weighted_mse_loss`](crate::autodiff::Graph::weighted_mse_loss).
pub fn weighted_mse(pred: &Tensor, target: &Tensor, sample_weights: Option<&[f64]>) -> Result<f64> {
    if pred.shape() != target.shape() {
        return Err(shape_err!("mse {:?} vs {:?}", pred.shape(), target.shape()));
    }
    let batch = pred.shape().first().copied().unwrap_or(1);
    let per = pred.len() / batch;
    let mut total = 0.0;
    for b in 0..batch {
        let s: f64 = (b * per..(b + 1) * per).map(|i| (pred.data()[i] - target.data()[i]).powi(2)).sum();
        total += sample_weights.map_or(1.0, |w| w[b]) * s;
    }
    Ok(total / pred.len() as f64)
}

fn sample_weights(weights: Option<&TimestepWeights>, t: &[usize]) -> Result<Option<Vec<f64>>> {
    weights.map(|w| t.iter().map(|&ti| w.get(ti)).collect()).transpose()
}

/// ε-prediction objective, conditioned on `y` when given.
pub fn epsilon_loss(
    model: &dyn Denoiser,
    x0: &Tensor,
    y: Option<&Tensor>,
    t: &[usize],
    eps: &Tensor,
    sched: &DiffusionSchedule,
    weights: Option<&TimestepWeights>,
) -> Result<f64> {
    let x_t = forward_sample(x0, t, eps, sched)?;
    let pred = model.predict(&x_t, t, y)?;
    weighted_mse(&pred, eps, sample_weights(weights, t)?.as_deref())
}

/// x₀-prediction objective without any condition.
pub fn x0_loss(
    model: &dyn Denoiser,
    x0: &Tensor,
    t: &[usize],
    eps: &Tensor,
    sched: &DiffusionSchedule,
    weights: Option<&TimestepWeights>,
) -> Result<f64> {
    let x_t = forward_sample(x0, t, eps, sched)?;
    let pred = model.predict(&x_t, t, None)?;
    weighted_mse(&pred, x0, sample_weights(weights, t)?.as_deref())
}

/// Uniform timestep in `1..=steps`.
pub fn sample_timestep<R: Rng + ?Sized>(rng: &mut R, steps: usize) -> usize {
    rng.gen_range(1..=steps)
}

/// x̂₀ estimate from one model call, clamped to `[-1, 1]`.
pub fn predict_x0(model: &dyn Denoiser, x_t: &Tensor, t: &[usize], y: Option<&Tensor>, sched: &DiffusionSchedule) -> Result<Tensor> {
    let out = model.predict(x_t, t, y)?;
    let x0 = match model.target() {
        Target::Eps => eps_to_x0(x_t, &out, t, sched)?,
        Target::X0 => out,
        Target::Logits => return Err(config_err!("a logits model does not estimate x0")),
    };
    Ok(x0.map(|v| v.clamp(-1.0, 1.0)))
}

/// Ancestral DDPM sampling from `t = T` down to 1.
///
/// Each step forms the posterior mean from the clamped x̂₀ and adds
/// `σ_t·z` with `σ_t² = β_t` for `t > 1`; the final step adds no noise.
pub fn ddpm_sample<R: Rng + ?Sized>(
    model: &dyn Denoiser,
    shape: &[usize],
    y: Option<&Tensor>,
    sched: &DiffusionSchedule,
    rng: &mut R,
    predict: Target,
) -> Result<Tensor> {
    if model.target() != predict {
        return Err(config_err!(
            "sampler expects a {} model, got {}",
            predict.as_str(),
            model.target().as_str()
        ));
    }
    if predict == Target::Logits {
        return Err(config_err!("ddpm sampling needs an eps or x0 model"));
    }
    let batch = *shape.first().ok_or_else(|| shape_err!("sample shape needs a batch axis"))?;
    let mut x = Tensor::randn(shape, rng);
    for t in (1..=sched.steps()).rev() {
        let ts = vec![t; batch];
        let x0_hat = predict_x0(model, &x, &ts, y, sched)?;
        let ab = sched.alpha_bars[t - 1];
        let ab_prev = sched.alpha_bar(t - 1)?;
        let beta = sched.betas[t - 1];
        let c0 = ab_prev.sqrt() * beta / (1.0 - ab);
        let ct = sched.alphas[t - 1].sqrt() * (1.0 - ab_prev) / (1.0 - ab);
        let mut mean = x0_hat.zip_map(&x, |a, b| c0 * a + ct * b)?;
        if t > 1 {
            let sigma = beta.sqrt();
            let z = Tensor::randn(shape, rng);
            mean = mean.zip_map(&z, |m, z| m + sigma * z)?;
        }
        x = mean;
    }
    Ok(x)
}
