//! Miniature conditional UNet denoisers.
//!
//! Three conditioning variants share one backbone:
//!
//! * [`Variant::Concat`]: the condition image is stacked onto the noisy input channels.
//! * [`Variant::EncoderSum`]: a separate image encoder with the backbone's channel
//!   plan adds its features to the backbone encoder at every resolution.
//! * [`Variant::FfParser`]: as `EncoderSum`, but each image feature map passes
//!   through a learned frequency-domain gate before it is added.
//!
//! Time conditioning is a sinusoidal embedding, a one-layer SiLU MLP and a
//! per-block linear projection added to the feature maps.

use std::collections::HashMap;
use std::fmt;
use std::fs;
use std::io::{Read, Write};
use std::path::Path;
use std::str::FromStr;

use rand::Rng;
use rand_distr::StandardNormal;

use crate::autodiff::{Graph, Var};
use crate::diffusion::{linear_schedule, Denoiser, DiffusionSchedule, Target, DEFAULT_BETA_END, DEFAULT_BETA_START};
use crate::error::{config_err, format_err, shape_err, Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Variant {
    Concat,
    EncoderSum,
    FfParser,
}

impl Variant {
    pub const ALL: [Variant; 3] = [Variant::Concat, Variant::EncoderSum, Variant::FfParser];

    pub fn as_str(self) -> &'static str {
        match self {
            Variant::Concat => "concat",
            Variant::EncoderSum => "encoder_sum",
            Variant::FfParser => "ff_parser",
        }
    }

    fn code(self) -> u8 {
        match self {
            Variant::Concat => 0,
            Variant::EncoderSum => 1,
            Variant::FfParser => 2,
        }
    }

    fn from_code(c: u8) -> Result<Self> {
        Ok(match c {
            0 => Variant::Concat,
            1 => Variant::EncoderSum,
            2 => Variant::FfParser,
            _ => return Err(format_err!("unknown variant code {c}")),
        })
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "concat" => Ok(Variant::Concat),
            "encoder_sum" | "encoder-sum" => Ok(Variant::EncoderSum),
            "ff_parser" | "ff-parser" => Ok(Variant::FfParser),
            _ => Err(config_err!("unknown model variant '{s}'")),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ModelConfig {
    pub variant: Variant,
    pub base_channels: usize,
    /// Number of down/up levels.
    pub depth: usize,
    pub time_embed_dim: usize,
    pub image_channels: usize,
    /// Square spatial extent of inputs.
    pub size: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig { variant: Variant::Concat, base_channels: 16, depth: 2, time_embed_dim: 32, image_channels: 1, size: 32 }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.depth == 0 {
            return Err(config_err!("depth must be at least 1"));
        }
        if self.base_channels == 0 || self.image_channels == 0 {
            return Err(config_err!("channel counts must be positive"));
        }
        if self.time_embed_dim == 0 || self.time_embed_dim % 2 != 0 {
            return Err(config_err!("time_embed_dim must be positive and even, got {}", self.time_embed_dim));
        }
        let div = 1usize << self.depth;
        if self.size == 0 || self.size % div != 0 {
            return Err(config_err!("spatial extent {} not divisible by 2^{}", self.size, self.depth));
        }
        Ok(())
    }

    /// Channels at level `l` (level `depth` is the bottleneck).
    pub fn channels(&self, level: usize) -> usize {
        self.base_channels << level
    }

    fn input_channels(&self) -> usize {
        match self.variant {
            Variant::Concat => 1 + self.image_channels,
            _ => 1,
        }
    }

    /// Ordered parameter names and shapes; the parameter set is a pure function of the config.
    pub fn parameter_specs(&self) -> Vec<(String, Vec<usize>)> {
        let d = self.time_embed_dim;
        let mut specs: Vec<(String, Vec<usize>)> = Vec::new();
        let mut push = |name: String, shape: Vec<usize>| specs.push((name, shape));
        push("time.w".into(), vec![d, d]);
        push("time.b".into(), vec![d]);
        push("stem.w".into(), vec![self.channels(0), self.input_channels(), 3, 3]);
        push("stem.b".into(), vec![self.channels(0)]);
        for l in 0..self.depth {
            let c = self.channels(l);
            push(format!("enc{l}.w"), vec![c, c, 3, 3]);
            push(format!("enc{l}.b"), vec![c]);
            push(format!("enc{l}.t"), vec![d, c]);
            push(format!("down{l}.w"), vec![self.channels(l + 1), c, 2, 2]);
            push(format!("down{l}.b"), vec![self.channels(l + 1)]);
        }
        let cm = self.channels(self.depth);
        push("mid.w".into(), vec![cm, cm, 3, 3]);
        push("mid.b".into(), vec![cm]);
        push("mid.t".into(), vec![d, cm]);
        for l in (0..self.depth).rev() {
            let c = self.channels(l);
            push(format!("dec{l}.w"), vec![c, self.channels(l + 1) + c, 3, 3]);
            push(format!("dec{l}.b"), vec![c]);
            push(format!("dec{l}.t"), vec![d, c]);
        }
        push("out.w".into(), vec![1, self.channels(0), 3, 3]);
        push("out.b".into(), vec![1]);
        if self.variant != Variant::Concat {
            push("img.stem.w".into(), vec![self.channels(0), self.image_channels, 3, 3]);
            push("img.stem.b".into(), vec![self.channels(0)]);
            for l in 0..self.depth {
                let c = self.channels(l);
                push(format!("img.enc{l}.w"), vec![c, c, 3, 3]);
                push(format!("img.enc{l}.b"), vec![c]);
                if self.variant == Variant::FfParser {
                    let s = self.size >> l;
                    push(format!("img.gate{l}"), vec![c, s, s]);
                }
                if l + 1 < self.depth {
                    push(format!("img.down{l}.w"), vec![self.channels(l + 1), c, 2, 2]);
                    push(format!("img.down{l}.b"), vec![self.channels(l + 1)]);
                }
            }
        }
        specs
    }

    pub fn parameter_count(&self) -> usize {
        self.parameter_specs().iter().map(|(_, s)| s.iter().product::<usize>()).sum()
    }
}

/// Interleaved `[sin(tω₀), cos(tω₀), sin(tω₁), …]` with `ωᵢ = 10000^(−2i/dim)`.
///
/// `steps` bounds the admissible timestep; `t = 0` is allowed for the
/// feed-forward regime.
pub fn sinusoidal_time_embedding(t: usize, dim: usize, steps: usize) -> Result<Vec<f64>> {
    if dim == 0 || dim % 2 != 0 {
        return Err(config_err!("embedding dimension must be positive and even, got {dim}"));
    }
    if t > steps {
        return Err(config_err!("timestep {t} beyond {steps}"));
    }
    let mut out = Vec::with_capacity(dim);
    for i in 0..dim / 2 {
        let freq = 10000f64.powf(-2.0 * i as f64 / dim as f64);
        let a = t as f64 * freq;
        out.push(a.sin());
        out.push(a.cos());
    }
    Ok(out)
}

/// A parameterized noise / mask estimator.
#[derive(Clone, Debug, PartialEq)]
pub struct DenoiserModel {
    config: ModelConfig,
    target: Target,
    /// Steps of the schedule the model is used with; bounds timestep inputs.
    steps: usize,
    /// Linear β endpoints of that schedule.
    beta_range: (f64, f64),
    names: Vec<String>,
    params: Vec<Tensor>,
}

/// Graph handles for a model's parameters.
pub struct BoundParams {
    vars: Vec<Var>,
    index: HashMap<String, usize>,
}

impl BoundParams {
    pub fn vars(&self) -> &[Var] {
        &self.vars
    }

    fn get(&self, name: &str) -> Var {
        self.vars[self.index[name]]
    }
}

/// Largest batch evaluated in one inference graph.
const INFERENCE_CHUNK: usize = 32;

impl DenoiserModel {
    /// He-normal weights, zero biases, unit frequency gates.
    pub fn build<R: Rng + ?Sized>(config: ModelConfig, target: Target, steps: usize, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let mut names = Vec::new();
        let mut params = Vec::new();
        for (name, shape) in config.parameter_specs() {
            let n: usize = shape.iter().product();
            let data: Vec<f64> = if name.contains("gate") {
                vec![1.0; n]
            } else if name.ends_with(".b") {
                vec![0.0; n]
            } else {
                let fan_in: usize = shape[1..].iter().product::<usize>().max(1);
                let fan_in = if shape.len() == 2 { shape[0] } else { fan_in };
                let mut std = (2.0 / fan_in as f64).sqrt();
                if name == "out.w" {
                    std *= 0.1;
                }
                (0..n).map(|_| std * rng.sample::<f64, _>(StandardNormal)).collect()
            };
            names.push(name);
            params.push(Tensor::new(shape, data)?.requiring_grad());
        }
        let beta_range = (DEFAULT_BETA_START, DEFAULT_BETA_END);
        Ok(DenoiserModel { config, target, steps, beta_range, names, params })
    }

    /// Records the β endpoints of the linear schedule the model belongs to.
    pub fn with_beta_range(mut self, beta_start: f64, beta_end: f64) -> Self {
        self.beta_range = (beta_start, beta_end);
        self
    }

    pub fn beta_range(&self) -> (f64, f64) {
        self.beta_range
    }

    /// The linear schedule recorded with the model.
    pub fn schedule(&self) -> Result<DiffusionSchedule> {
        linear_schedule(self.steps, self.beta_range.0, self.beta_range.1)
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn parameter_names(&self) -> &[String] {
        &self.names
    }

    pub fn params(&self) -> &[Tensor] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Tensor] {
        &mut self.params
    }

    pub fn parameter_count(&self) -> usize {
        self.params.iter().map(Tensor::len).sum()
    }

    pub fn param(&self, name: &str) -> Option<&Tensor> {
        self.names.iter().position(|n| n == name).map(|i| &self.params[i])
    }

    /// Records every parameter on `g`, as gradient leaves when `trainable`.
    pub fn bind(&self, g: &mut Graph, trainable: bool) -> BoundParams {
        let vars = self
            .params
            .iter()
            .map(|p| if trainable { g.param(p) } else { g.constant(p.clone()) })
            .collect();
        let index = self.names.iter().enumerate().map(|(i, n)| (n.clone(), i)).collect();
        BoundParams { vars, index }
    }

    /// Wraps already-recorded parameter handles, in [`parameter_names`](Self::parameter_names) order.
    pub fn bind_vars(&self, vars: Vec<Var>) -> Result<BoundParams> {
        if vars.len() != self.params.len() {
            return Err(shape_err!("{} handles for {} parameters", vars.len(), self.params.len()));
        }
        let index = self.names.iter().enumerate().map(|(i, n)| (n.clone(), i)).collect();
        Ok(BoundParams { vars, index })
    }

    fn conv(&self, g: &mut Graph, p: &BoundParams, name: &str, x: Var, stride: usize, pad: usize) -> Result<Var> {
        let y = g.conv2d(x, p.get(&format!("{name}.w")), stride, pad)?;
        g.add_channel(y, p.get(&format!("{name}.b")))
    }

    fn time_block(&self, g: &mut Graph, p: &BoundParams, name: &str, x: Var, temb: Var) -> Result<Var> {
        let h = self.conv(g, p, name, x, 1, 1)?;
        let proj = g.matmul(temb, p.get(&format!("{name}.t")))?;
        let h = g.add_channel(h, proj)?;
        Ok(g.silu(h))
    }

    /// Forward pass on a graph; output has the shape of `x_t`.
    ///
    /// `y = None` runs the network unconditioned: the concat variant sees
    /// zero image channels and the encoder variants skip the image branch.
    pub fn forward(&self, g: &mut Graph, p: &BoundParams, x_t: Var, t: &[usize], y: Option<Var>) -> Result<Var> {
        let cfg = &self.config;
        let shape = g.shape(x_t).to_vec();
        if shape.len() != 4 || shape[1] != 1 || shape[2] != cfg.size || shape[3] != cfg.size {
            return Err(shape_err!("expected [B,1,{0},{0}] input, got {shape:?}", cfg.size));
        }
        let batch = shape[0];
        if t.len() != batch {
            return Err(shape_err!("{} timesteps for batch of {batch}", t.len()));
        }
        if let Some(yv) = y {
            let ys = g.shape(yv);
            if ys != [batch, cfg.image_channels, cfg.size, cfg.size] {
                return Err(shape_err!("condition shape {ys:?} does not match input {shape:?}"));
            }
        }

        let d = cfg.time_embed_dim;
        let mut emb = Vec::with_capacity(batch * d);
        for &ti in t {
            emb.extend(sinusoidal_time_embedding(ti, d, self.steps)?);
        }
        let emb = g.constant(Tensor::new(vec![batch, d], emb)?);
        let temb = g.matmul(emb, p.get("time.w"))?;
        let temb = g.add_channel(temb, p.get("time.b"))?;
        let temb = g.silu(temb);

        let input = match cfg.variant {
            Variant::Concat => {
                let cond = match y {
                    Some(yv) => yv,
                    None => g.constant(Tensor::zeros(&[batch, cfg.image_channels, cfg.size, cfg.size])),
                };
                g.concat_channels(&[x_t, cond])?
            }
            _ => x_t,
        };

        let image_features = match (cfg.variant, y) {
            (Variant::EncoderSum | Variant::FfParser, Some(yv)) => Some(self.image_encoder(g, p, yv)?),
            _ => None,
        };

        let h0 = self.conv(g, p, "stem", input, 1, 1)?;
        let mut h = g.silu(h0);
        let mut skips = Vec::with_capacity(cfg.depth);
        for l in 0..cfg.depth {
            h = self.time_block(g, p, &format!("enc{l}"), h, temb)?;
            if let Some(feats) = &image_features {
                h = g.add(h, feats[l])?;
            }
            skips.push(h);
            let down = self.conv(g, p, &format!("down{l}"), h, 2, 0)?;
            h = g.silu(down);
        }
        h = self.time_block(g, p, "mid", h, temb)?;
        for l in (0..cfg.depth).rev() {
            let up = g.upsample2x(h)?;
            let cat = g.concat_channels(&[up, skips[l]])?;
            h = self.time_block(g, p, &format!("dec{l}"), cat, temb)?;
        }
        self.conv(g, p, "out", h, 1, 1)
    }

    fn image_encoder(&self, g: &mut Graph, p: &BoundParams, y: Var) -> Result<Vec<Var>> {
        let cfg = &self.config;
        let stem = self.conv(g, p, "img.stem", y, 1, 1)?;
        let mut h = g.silu(stem);
        let mut feats = Vec::with_capacity(cfg.depth);
        for l in 0..cfg.depth {
            let c = self.conv(g, p, &format!("img.enc{l}"), h, 1, 1)?;
            h = g.silu(c);
            let f = if cfg.variant == Variant::FfParser {
                g.ff_parser(h, p.get(&format!("img.gate{l}")))?
            } else {
                h
            };
            feats.push(f);
            if l + 1 < cfg.depth {
                let down = self.conv(g, p, &format!("img.down{l}"), h, 2, 0)?;
                h = g.silu(down);
            }
        }
        Ok(feats)
    }

    /// Inference without gradient tracking.
    pub fn predict(&self, x_t: &Tensor, t: &[usize], y: Option<&Tensor>) -> Result<Tensor> {
        let batch = *x_t.shape().first().ok_or_else(|| shape_err!("predict needs a batch axis"))?;
        if t.len() != batch {
            return Err(shape_err!("{} timesteps for batch of {batch}", t.len()));
        }
        let mut outs = Vec::new();
        let mut start = 0;
        while start < batch {
            let end = (start + INFERENCE_CHUNK).min(batch);
            let slice = |src: &Tensor| -> Result<Tensor> {
                let per = src.len() / batch;
                let mut shape = src.shape().to_vec();
                shape[0] = end - start;
                Tensor::new(shape, src.data()[start * per..end * per].to_vec())
            };
            let mut g = Graph::new();
            let p = self.bind(&mut g, false);
            let xv = g.constant(slice(x_t)?);
            let yv = match y {
                Some(yt) => {
                    if yt.shape().first() != Some(&batch) {
                        return Err(shape_err!("condition batch {:?} vs {batch}", yt.shape()));
                    }
                    Some(g.constant(slice(yt)?))
                }
                None => None,
            };
            let out = self.forward(&mut g, &p, xv, &t[start..end], yv)?;
            outs.push(g.tensor(out));
            start = end;
        }
        if outs.len() == 1 {
            return Ok(outs.pop().expect("one chunk"));
        }
        Tensor::stack_batch(&outs)
    }

    // ---- checkpoints ---------------------------------------------------

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut buf = Vec::new();
        buf.extend_from_slice(CHECKPOINT_MAGIC);
        buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        let cfg = &self.config;
        buf.push(cfg.variant.code());
        for v in [cfg.base_channels, cfg.depth, cfg.time_embed_dim, cfg.image_channels, cfg.size, self.steps] {
            buf.extend_from_slice(&(v as u32).to_le_bytes());
        }
        buf.extend_from_slice(&self.beta_range.0.to_le_bytes());
        buf.extend_from_slice(&self.beta_range.1.to_le_bytes());
        buf.push(match self.target {
            Target::Eps => 0,
            Target::X0 => 1,
            Target::Logits => 2,
        });
        buf.extend_from_slice(&(self.params.len() as u32).to_le_bytes());
        for (name, p) in self.names.iter().zip(&self.params) {
            buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
            buf.extend_from_slice(name.as_bytes());
            buf.extend_from_slice(&(p.shape().len() as u32).to_le_bytes());
            for &d in p.shape() {
                buf.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for v in p.data() {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        }
        let mut f = fs::File::create(path)?;
        f.write_all(&buf)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        fs::File::open(path)?.read_to_end(&mut bytes)?;
        Self::from_bytes(&bytes)
    }

    /// Loads a checkpoint and rejects it unless its config equals `expected`.
    pub fn load_as(path: &Path, expected: &ModelConfig) -> Result<Self> {
        let m = Self::load(path)?;
        if &m.config != expected {
            return Err(format_err!(
                "checkpoint holds a {} model ({:?}), expected {:?}",
                m.config.variant,
                m.config,
                expected
            ));
        }
        Ok(m)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = ByteReader { bytes, pos: 0 };
        if r.take(CHECKPOINT_MAGIC.len())? != CHECKPOINT_MAGIC {
            return Err(format_err!("not a checkpoint file"));
        }
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(format_err!("checkpoint version {version}, expected {CHECKPOINT_VERSION}"));
        }
        let variant = Variant::from_code(r.u8()?)?;
        let mut vals = [0usize; 6];
        for v in vals.iter_mut() {
            *v = r.u32()? as usize;
        }
        let config = ModelConfig {
            variant,
            base_channels: vals[0],
            depth: vals[1],
            time_embed_dim: vals[2],
            image_channels: vals[3],
            size: vals[4],
        };
        config.validate().map_err(|e| format_err!("invalid stored config: {e}"))?;
        let steps = vals[5];
        let beta_range = (r.f64()?, r.f64()?);
        let target = match r.u8()? {
            0 => Target::Eps,
            1 => Target::X0,
            2 => Target::Logits,
            c => return Err(format_err!("unknown target code {c}")),
        };
        let count = r.u32()? as usize;
        let specs = config.parameter_specs();
        if count != specs.len() {
            return Err(format_err!("checkpoint has {count} tensors, config implies {}", specs.len()));
        }
        let mut names = Vec::with_capacity(count);
        let mut params = Vec::with_capacity(count);
        for (spec_name, spec_shape) in specs {
            let len = r.u32()? as usize;
            let name = String::from_utf8(r.take(len)?.to_vec()).map_err(|_| format_err!("parameter name is not utf-8"))?;
            let rank = r.u32()? as usize;
            let shape = (0..rank).map(|_| r.u32().map(|v| v as usize)).collect::<Result<Vec<_>>>()?;
            if name != spec_name || shape != spec_shape {
                return Err(format_err!("parameter {name} {shape:?} does not match {spec_name} {spec_shape:?}"));
            }
            let n: usize = shape.iter().product();
            let data = (0..n).map(|_| r.f64()).collect::<Result<Vec<_>>>()?;
            names.push(name);
            params.push(Tensor::new(shape, data)?.requiring_grad());
        }
        if r.pos != bytes.len() {
            return Err(format_err!("{} trailing bytes in checkpoint", bytes.len() - r.pos));
        }
        Ok(DenoiserModel { config, target, steps, beta_range, names, params })
    }
}

impl Denoiser for DenoiserModel {
    fn target(&self) -> Target {
        self.target
    }

    fn predict(&self, x_t: &Tensor, t: &[usize], y: Option<&Tensor>) -> Result<Tensor> {
        DenoiserModel::predict(self, x_t, t, y)
    }
}

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"DSEGCKPT";
pub const CHECKPOINT_VERSION: u32 = 1;

struct ByteReader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> ByteReader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(format_err!("checkpoint truncated at byte {}", self.pos));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}
