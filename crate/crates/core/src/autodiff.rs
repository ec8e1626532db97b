//! Tape-based reverse-mode automatic differentiation.
//!
//! Operations are appended to a [`Graph`] in execution order, so the tape is
//! already a topological order and [`Graph::backward`] is a single reverse
//! sweep that visits every node once. Gradients accumulate across repeated
//! `backward` calls until [`Graph::zero_grad`] is called.

use crate::error::{data_err, shape_err, Result};
use crate::fourier::Dft2;
use crate::tensor::{numel, Tensor};

/// Handle to a value recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Elementwise {
    Add,
    Sub,
    Mul,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Silu,
    Sigmoid,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Reduction {
    Sum,
    Mean,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Binary(Elementwise, Var, Var),
    Scale(Var, f64),
    Matmul(Var, Var),
    Conv2d { input: Var, kernel: Var, stride: usize, pad: usize },
    AddChannel { x: Var, bias: Var },
    Act(Activation, Var),
    Reduce { kind: Reduction, x: Var, axes: Vec<usize> },
    Mse { pred: Var, target: Var, weights: Option<Vec<f64>> },
    DiceCe { logits: Var, target: Vec<f64>, mix: f64 },
    Upsample2x(Var),
    ConcatChannels(Vec<Var>),
    FfParser { x: Var, gate: Var },
}

#[derive(Debug)]
struct Node {
    shape: Vec<usize>,
    value: Vec<f64>,
    op: Op,
    requires_grad: bool,
}

/// Recorded computation with per-node gradient buffers.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
}

/// Dice smoothing constant, added to numerator and denominator.
pub const DICE_SMOOTH: f64 = 1.0;

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

/// `c = alpha·op(a)·op(b) + beta·c` through explicit row/column strides.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    (rsa, csa): (usize, usize),
    b: &[f64],
    (rsb, csb): (usize, usize),
    beta: f64,
    c: &mut [f64],
) {
    assert!(m == 0 || k == 0 || (m - 1) * rsa + (k - 1) * csa < a.len());
    assert!(k == 0 || n == 0 || (k - 1) * rsb + (n - 1) * csb < b.len());
    assert!(c.len() >= m * n);
    // SAFETY: the asserts above bound every index the kernel touches.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

struct ConvGeom {
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    ho: usize,
    wo: usize,
    stride: usize,
    pad: usize,
}

impl ConvGeom {
    /// Output columns `[lo, hi)` whose input column `ox·stride + kj − pad` is in bounds.
    fn valid_cols(&self, kj: usize) -> (usize, usize) {
        let lo = (self.pad.saturating_sub(kj) + self.stride - 1) / self.stride;
        // ox·stride + kj − pad <= w − 1
        let hi = if self.w + self.pad < kj + 1 { 0 } else { ((self.w + self.pad - kj - 1) / self.stride + 1).min(self.wo) };
        (lo.min(hi), hi)
    }

    fn im2col(&self, input: &[f64], cols: &mut [f64]) {
        let hw = self.ho * self.wo;
        for c in 0..self.c {
            let plane = &input[c * self.h * self.w..(c + 1) * self.h * self.w];
            for ki in 0..self.kh {
                for kj in 0..self.kw {
                    let row = (c * self.kh + ki) * self.kw + kj;
                    let dst = &mut cols[row * hw..(row + 1) * hw];
                    let (lo, hi) = self.valid_cols(kj);
                    for oy in 0..self.ho {
                        let iy = (oy * self.stride + ki) as isize - self.pad as isize;
                        let line = &mut dst[oy * self.wo..(oy + 1) * self.wo];
                        if iy < 0 || iy >= self.h as isize || lo >= hi {
                            line.fill(0.0);
                            continue;
                        }
                        let src = &plane[iy as usize * self.w..(iy as usize + 1) * self.w];
                        line[..lo].fill(0.0);
                        line[hi..].fill(0.0);
                        let first = lo * self.stride + kj - self.pad;
                        if self.stride == 1 {
                            line[lo..hi].copy_from_slice(&src[first..first + hi - lo]);
                        } else {
                            for (k, v) in line[lo..hi].iter_mut().enumerate() {
                                *v = src[first + k * self.stride];
                            }
                        }
                    }
                }
            }
        }
    }

    fn col2im_add(&self, cols: &[f64], grad_in: &mut [f64]) {
        let hw = self.ho * self.wo;
        for c in 0..self.c {
            let plane = &mut grad_in[c * self.h * self.w..(c + 1) * self.h * self.w];
            for ki in 0..self.kh {
                for kj in 0..self.kw {
                    let row = (c * self.kh + ki) * self.kw + kj;
                    let src = &cols[row * hw..(row + 1) * hw];
                    let (lo, hi) = self.valid_cols(kj);
                    if lo >= hi {
                        continue;
                    }
                    for oy in 0..self.ho {
                        let iy = (oy * self.stride + ki) as isize - self.pad as isize;
                        if iy < 0 || iy >= self.h as isize {
                            continue;
                        }
                        let line = &mut plane[iy as usize * self.w..(iy as usize + 1) * self.w];
                        let first = lo * self.stride + kj - self.pad;
                        let from = &src[oy * self.wo + lo..oy * self.wo + hi];
                        if self.stride == 1 {
                            line[first..first + hi - lo].iter_mut().zip(from).for_each(|(a, b)| *a += b);
                        } else {
                            for (k, v) in from.iter().enumerate() {
                                line[first + k * self.stride] += v;
                            }
                        }
                    }
                }
            }
        }
    }
}

fn reduce_map(shape: &[usize], axes: &[usize]) -> (Vec<usize>, Vec<usize>) {
    let out_shape: Vec<usize> =
        shape.iter().enumerate().filter(|(i, _)| !axes.contains(i)).map(|(_, &d)| d).collect();
    let n = numel(shape);
    let mut map = Vec::with_capacity(n);
    let mut idx = vec![0usize; shape.len()];
    for _ in 0..n {
        let mut o = 0;
        for (ax, &i) in idx.iter().enumerate() {
            if !axes.contains(&ax) {
                o = o * shape[ax] + i;
            }
        }
        map.push(o);
        for ax in (0..shape.len()).rev() {
            idx[ax] += 1;
            if idx[ax] < shape[ax] {
                break;
            }
            idx[ax] = 0;
        }
    }
    (out_shape, map)
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, shape: Vec<usize>, value: Vec<f64>, op: Op, requires_grad: bool) -> Var {
        debug_assert_eq!(numel(&shape), value.len());
        self.nodes.push(Node { shape, value, op, requires_grad });
        self.grads.push(None);
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Records a leaf, copying the tensor's values and honouring its grad flag.
    pub fn leaf(&mut self, t: &Tensor) -> Var {
        self.push(t.shape().to_vec(), t.data().to_vec(), Op::Leaf, t.requires_grad())
    }

    /// Records a leaf that never receives gradient.
    pub fn constant(&mut self, t: Tensor) -> Var {
        let shape = t.shape().to_vec();
        self.push(shape, t.into_data(), Op::Leaf, false)
    }

    /// Records a gradient-receiving leaf regardless of the tensor's flag.
    pub fn param(&mut self, t: &Tensor) -> Var {
        self.push(t.shape().to_vec(), t.data().to_vec(), Op::Leaf, true)
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value
    }

    pub fn tensor(&self, v: Var) -> Tensor {
        let n = &self.nodes[v.0];
        Tensor::new(n.shape.clone(), n.value.clone()).expect("node shape consistent")
    }

    /// Accumulated gradient of `v`, if any backward pass reached it.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.grads[v.0].as_deref()
    }

    pub fn zero_grad(&mut self) {
        self.grads.iter_mut().for_each(|g| *g = None);
    }

    /// Adds the gradient of `v` (zeros if unreached) into `t.grad`.
    pub fn write_grad(&self, v: Var, t: &mut Tensor) -> Result<()> {
        match self.grad(v) {
            Some(g) => t.accumulate_grad(g),
            None => t.accumulate_grad(&vec![0.0; t.len()]),
        }
    }

    // ---- elementwise -------------------------------------------------

    pub fn elementwise(&mut self, kind: Elementwise, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        let b_scalar = numel(sb) == 1;
        if sa != sb && !b_scalar {
            return Err(shape_err!("elementwise {kind:?}: {sa:?} vs {sb:?}"));
        }
        let (va, vb) = (self.value(a), self.value(b));
        let f = |x: f64, y: f64| match kind {
            Elementwise::Add => x + y,
            Elementwise::Sub => x - y,
            Elementwise::Mul => x * y,
        };
        let value: Vec<f64> = if sa == sb {
            va.iter().zip(vb).map(|(&x, &y)| f(x, y)).collect()
        } else {
            let y = vb[0];
            va.iter().map(|&x| f(x, y)).collect()
        };
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(sa.to_vec(), value, Op::Binary(kind, a, b), rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise(Elementwise::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise(Elementwise::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise(Elementwise::Mul, a, b)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let value = self.value(a).iter().map(|v| v * c).collect();
        let rg = self.rg(a);
        self.push(self.shape(a).to_vec(), value, Op::Scale(a, c), rg)
    }

    // ---- linear algebra ----------------------------------------------

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(shape_err!("matmul {sa:?} x {sb:?}"));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, self.value(a), (k, 1), self.value(b), (n, 1), 0.0, &mut out);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(vec![m, n], out, Op::Matmul(a, b), rg))
    }

    fn conv_geom(&self, input: Var, kernel: Var, stride: usize, pad: usize) -> Result<(ConvGeom, usize, usize)> {
        let (si, sk) = (self.shape(input), self.shape(kernel));
        if si.len() != 4 || sk.len() != 4 || si[1] != sk[1] {
            return Err(shape_err!("conv2d input {si:?} kernel {sk:?}"));
        }
        if stride == 0 {
            return Err(shape_err!("conv2d stride must be positive"));
        }
        let (b, c, h, w) = (si[0], si[1], si[2], si[3]);
        let (f, kh, kw) = (sk[0], sk[2], sk[3]);
        let (ph, pw) = (h + 2 * pad, w + 2 * pad);
        if kh > ph || kw > pw {
            return Err(shape_err!("conv2d kernel {kh}x{kw} larger than padded input {ph}x{pw}"));
        }
        if (ph - kh) % stride != 0 || (pw - kw) % stride != 0 {
            return Err(shape_err!(
                "conv2d output extent not integral: ({ph}-{kh})/{stride}, ({pw}-{kw})/{stride}"
            ));
        }
        let geom = ConvGeom {
            c,
            h,
            w,
            kh,
            kw,
            ho: (ph - kh) / stride + 1,
            wo: (pw - kw) / stride + 1,
            stride,
            pad,
        };
        Ok((geom, b, f))
    }

    /// 2-D cross-correlation of `[B,C,H,W]` with `[F,C,kh,kw]`.
    pub fn conv2d(&mut self, input: Var, kernel: Var, stride: usize, pad: usize) -> Result<Var> {
        let (g, b, f) = self.conv_geom(input, kernel, stride, pad)?;
        let ck = g.c * g.kh * g.kw;
        let hw = g.ho * g.wo;
        let in_stride = g.c * g.h * g.w;
        let mut cols = vec![0.0; ck * hw];
        let mut out = vec![0.0; b * f * hw];
        let (vin, vk) = (self.value(input), self.value(kernel));
        for bi in 0..b {
            g.im2col(&vin[bi * in_stride..(bi + 1) * in_stride], &mut cols);
            gemm(f, ck, hw, vk, (ck, 1), &cols, (hw, 1), 0.0, &mut out[bi * f * hw..(bi + 1) * f * hw]);
        }
        let rg = self.rg(input) || self.rg(kernel);
        Ok(self.push(vec![b, f, g.ho, g.wo], out, Op::Conv2d { input, kernel, stride, pad }, rg))
    }

    /// Adds `bias` of shape `[C]` or `[B,C]` across the trailing axes of `x` `[B,C,...]`.
    pub fn add_channel(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (sx, sb) = (self.shape(x), self.shape(bias));
        let ok = sx.len() >= 2
            && ((sb.len() == 1 && sb[0] == sx[1]) || (sb.len() == 2 && sb[0] == sx[0] && sb[1] == sx[1]));
        if !ok {
            return Err(shape_err!("add_channel {sx:?} + {sb:?}"));
        }
        let (bsz, c) = (sx[0], sx[1]);
        let inner = numel(&sx[2..]);
        let per_batch = sb.len() == 2;
        let (vx, vb) = (self.value(x), self.value(bias));
        let mut out = vx.to_vec();
        for bi in 0..bsz {
            for ci in 0..c {
                let add = if per_batch { vb[bi * c + ci] } else { vb[ci] };
                let base = (bi * c + ci) * inner;
                out[base..base + inner].iter_mut().for_each(|v| *v += add);
            }
        }
        let rg = self.rg(x) || self.rg(bias);
        Ok(self.push(sx.to_vec(), out, Op::AddChannel { x, bias }, rg))
    }

    // ---- nonlinearities ------------------------------------------------

    pub fn activation(&mut self, kind: Activation, x: Var) -> Var {
        let value = self
            .value(x)
            .iter()
            .map(|&v| match kind {
                Activation::Relu => v.max(0.0),
                Activation::Silu => v * sigmoid(v),
                Activation::Sigmoid => sigmoid(v),
            })
            .collect();
        let rg = self.rg(x);
        self.push(self.shape(x).to_vec(), value, Op::Act(kind, x), rg)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.activation(Activation::Relu, x)
    }

    pub fn silu(&mut self, x: Var) -> Var {
        self.activation(Activation::Silu, x)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.activation(Activation::Sigmoid, x)
    }

    // ---- reductions ----------------------------------------------------

    /// Reduces over `axes`, dropping them from the shape. An empty axis list is the identity.
    pub fn reduce(&mut self, kind: Reduction, x: Var, axes: &[usize]) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        let mut seen = vec![false; sx.len()];
        for &a in axes {
            if a >= sx.len() || seen[a] {
                return Err(shape_err!("invalid reduction axis {a} for shape {sx:?}"));
            }
            seen[a] = true;
        }
        let (out_shape, map) = reduce_map(&sx, axes);
        let count: usize = axes.iter().map(|&a| sx[a]).product();
        let mut out = vec![0.0; numel(&out_shape)];
        for (v, &o) in self.value(x).iter().zip(&map) {
            out[o] += v;
        }
        if kind == Reduction::Mean {
            out.iter_mut().for_each(|v| *v /= count as f64);
        }
        let rg = self.rg(x);
        Ok(self.push(out_shape, out, Op::Reduce { kind, x, axes: axes.to_vec() }, rg))
    }

    pub fn sum_all(&mut self, x: Var) -> Var {
        let axes: Vec<usize> = (0..self.shape(x).len()).collect();
        self.reduce(Reduction::Sum, x, &axes).expect("all axes valid")
    }

    pub fn mean_all(&mut self, x: Var) -> Var {
        let axes: Vec<usize> = (0..self.shape(x).len()).collect();
        self.reduce(Reduction::Mean, x, &axes).expect("all axes valid")
    }

    // ---- losses --------------------------------------------------------

    /// Mean squared error averaged over every element.
    pub fn mse_loss(&mut self, pred: Var, target: Var) -> Result<Var> {
        self.weighted_mse_loss(pred, target, None)
    }

    /// Per-sample weighted MSE: `(1/B) Σ_b w_b · mean((pred_b − target_b)²)`.
    ///
    /// With `weights = None` every sample has weight 1 and this is the plain element mean.
    pub fn weighted_mse_loss(&mut self, pred: Var, target: Var, weights: Option<Vec<f64>>) -> Result<Var> {
        let (sp, st) = (self.shape(pred), self.shape(target));
        if sp != st {
            return Err(shape_err!("mse_loss {sp:?} vs {st:?}"));
        }
        let n = numel(sp);
        let batch = sp.first().copied().unwrap_or(1);
        if let Some(w) = &weights {
            if w.len() != batch {
                return Err(shape_err!("{} sample weights for batch of {batch}", w.len()));
            }
        }
        let per = n / batch;
        let (vp, vt) = (self.value(pred), self.value(target));
        let mut total = 0.0;
        for b in 0..batch {
            let s: f64 = (b * per..(b + 1) * per).map(|i| (vp[i] - vt[i]).powi(2)).sum();
            total += weights.as_ref().map_or(1.0, |w| w[b]) * s;
        }
        let rg = self.rg(pred) || self.rg(target);
        Ok(self.push(vec![], vec![total / n as f64], Op::Mse { pred, target, weights }, rg))
    }

    /// `mix·Dice + (1−mix)·BCE` on logits against a binary target.
    ///
    /// Soft Dice is computed per sample (leading axis) with smoothing
    /// [`DICE_SMOOTH`] and averaged; cross-entropy is the element mean.
    pub fn dice_ce_loss(&mut self, logits: Var, target: &Tensor, mix: f64) -> Result<Var> {
        let sl = self.shape(logits);
        if sl != target.shape() {
            return Err(shape_err!("dice_ce_loss {sl:?} vs {:?}", target.shape()));
        }
        if !(0.0..=1.0).contains(&mix) {
            return Err(data_err!("dice/ce mix {mix} outside [0,1]"));
        }
        if target.data().iter().any(|&v| v != 0.0 && v != 1.0) {
            return Err(data_err!("dice_ce_loss target must be binary"));
        }
        let value = dice_ce_value(self.value(logits), target.data(), sl, mix);
        let rg = self.rg(logits);
        Ok(self.push(vec![], vec![value], Op::DiceCe { logits, target: target.data().to_vec(), mix }, rg))
    }

    // ---- layout --------------------------------------------------------

    /// Nearest-neighbour 2× upsampling of `[B,C,H,W]`.
    pub fn upsample2x(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 4 {
            return Err(shape_err!("upsample2x expects rank 4, got {s:?}"));
        }
        let (bc, h, w) = (s[0] * s[1], s[2], s[3]);
        let v = self.value(x);
        let mut out = vec![0.0; bc * 4 * h * w];
        for p in 0..bc {
            for y in 0..2 * h {
                for xx in 0..2 * w {
                    out[(p * 2 * h + y) * 2 * w + xx] = v[(p * h + y / 2) * w + xx / 2];
                }
            }
        }
        let rg = self.rg(x);
        Ok(self.push(vec![s[0], s[1], 2 * h, 2 * w], out, Op::Upsample2x(x), rg))
    }

    /// Concatenates `[B,Ci,...]` tensors along axis 1.
    pub fn concat_channels(&mut self, parts: &[Var]) -> Result<Var> {
        let first = self.shape(*parts.first().ok_or_else(|| shape_err!("concat of nothing"))?).to_vec();
        if first.len() < 2 {
            return Err(shape_err!("concat_channels needs rank >= 2"));
        }
        let mut channels = 0;
        for &p in parts {
            let s = self.shape(p);
            if s.len() != first.len() || s[0] != first[0] || s[2..] != first[2..] {
                return Err(shape_err!("concat_channels {s:?} vs {first:?}"));
            }
            channels += s[1];
        }
        let inner = numel(&first[2..]);
        let batch = first[0];
        let mut out = Vec::with_capacity(batch * channels * inner);
        for b in 0..batch {
            for &p in parts {
                let c = self.shape(p)[1];
                out.extend_from_slice(&self.value(p)[b * c * inner..(b + 1) * c * inner]);
            }
        }
        let mut shape = first.clone();
        shape[1] = channels;
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(shape, out, Op::ConcatChannels(parts.to_vec()), rg))
    }

    /// Frequency-domain gating: `Re(IDFT2(gate ⊙ DFT2(x)))` per channel.
    ///
    /// `x` is `[B,C,H,W]`, `gate` is `[C,H,W]` and shared across the batch.
    pub fn ff_parser(&mut self, x: Var, gate: Var) -> Result<Var> {
        let (sx, sg) = (self.shape(x).to_vec(), self.shape(gate));
        if sx.len() != 4 || sg != &sx[1..] {
            return Err(shape_err!("ff_parser feature {sx:?} gate {sg:?}"));
        }
        let (b, c, hw) = (sx[0], sx[1], sx[2] * sx[3]);
        let dft = Dft2::new(sx[2], sx[3]);
        let (vx, vg) = (self.value(x), self.value(gate));
        let mut out = Vec::with_capacity(vx.len());
        for bi in 0..b {
            for ci in 0..c {
                let base = (bi * c + ci) * hw;
                out.extend(dft.gated(&vx[base..base + hw], &vg[ci * hw..(ci + 1) * hw]));
            }
        }
        let rg = self.rg(x) || self.rg(gate);
        Ok(self.push(sx, out, Op::FfParser { x, gate }, rg))
    }

    // ---- backward ------------------------------------------------------

    /// Reverse sweep from a one-element `loss`, accumulating into every
    /// reachable gradient-requiring node.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if numel(self.shape(loss)) != 1 {
            return Err(shape_err!("backward from non-scalar of shape {:?}", self.shape(loss)));
        }
        let mut local: Vec<Option<Vec<f64>>> = (0..=loss.0).map(|_| None).collect();
        local[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(g) = local[i].take() else { continue };
            if !self.nodes[i].requires_grad {
                continue;
            }
            self.propagate(i, &g, &mut local);
            match self.grads[i].as_mut() {
                Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
                None => self.grads[i] = Some(g),
            }
        }
        Ok(())
    }

    fn propagate(&self, i: usize, g: &[f64], local: &mut [Option<Vec<f64>>]) {
        let nodes = &self.nodes;
        let node = &nodes[i];
        match &node.op {
            Op::Leaf => {}
            Op::Binary(kind, a, b) => {
                let (va, vb) = (&nodes[a.0].value, &nodes[b.0].value);
                let broadcast = vb.len() != va.len();
                if let Some(ga) = slot(nodes, local, *a) {
                    match kind {
                        Elementwise::Add | Elementwise::Sub => ga.iter_mut().zip(g).for_each(|(x, y)| *x += y),
                        Elementwise::Mul => {
                            for (j, x) in ga.iter_mut().enumerate() {
                                *x += g[j] * if broadcast { vb[0] } else { vb[j] };
                            }
                        }
                    }
                }
                if let Some(gb) = slot(nodes, local, *b) {
                    for j in 0..g.len() {
                        let d = match kind {
                            Elementwise::Add => g[j],
                            Elementwise::Sub => -g[j],
                            Elementwise::Mul => g[j] * va[j],
                        };
                        gb[if broadcast { 0 } else { j }] += d;
                    }
                }
            }
            Op::Scale(a, c) => {
                if let Some(ga) = slot(nodes, local, *a) {
                    ga.iter_mut().zip(g).for_each(|(x, y)| *x += c * y);
                }
            }
            Op::Matmul(a, b) => {
                let (sa, sb) = (&nodes[a.0].shape, &nodes[b.0].shape);
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                let (va, vb) = (nodes[a.0].value.clone(), nodes[b.0].value.clone());
                if let Some(ga) = slot(nodes, local, *a) {
                    gemm(m, n, k, g, (n, 1), &vb, (1, n), 1.0, ga);
                }
                if let Some(gb) = slot(nodes, local, *b) {
                    gemm(k, m, n, &va, (1, k), g, (n, 1), 1.0, gb);
                }
            }
            Op::Conv2d { input, kernel, stride, pad } => {
                let (geom, b, f) = self.conv_geom(*input, *kernel, *stride, *pad).expect("validated in forward");
                let ck = geom.c * geom.kh * geom.kw;
                let hw = geom.ho * geom.wo;
                let in_stride = geom.c * geom.h * geom.w;
                let vin = &nodes[input.0].value;
                let vk = &nodes[kernel.0].value;
                let need_k = nodes[kernel.0].requires_grad;
                let need_in = nodes[input.0].requires_grad;
                let mut cols = vec![0.0; ck * hw];
                if need_k {
                    let mut gk = vec![0.0; f * ck];
                    for bi in 0..b {
                        geom.im2col(&vin[bi * in_stride..(bi + 1) * in_stride], &mut cols);
                        gemm(f, hw, ck, &g[bi * f * hw..(bi + 1) * f * hw], (hw, 1), &cols, (1, hw), 1.0, &mut gk);
                    }
                    let dst = slot(nodes, local, *kernel).expect("kernel requires grad");
                    dst.iter_mut().zip(&gk).for_each(|(x, y)| *x += y);
                }
                if need_in {
                    let vk = vk.clone();
                    let gin = slot(nodes, local, *input).expect("input requires grad");
                    for bi in 0..b {
                        gemm(ck, f, hw, &vk, (1, ck), &g[bi * f * hw..(bi + 1) * f * hw], (hw, 1), 0.0, &mut cols);
                        geom.col2im_add(&cols, &mut gin[bi * in_stride..(bi + 1) * in_stride]);
                    }
                }
            }
            Op::AddChannel { x, bias } => {
                let sx = &nodes[x.0].shape;
                let (bsz, c) = (sx[0], sx[1]);
                let inner = numel(&sx[2..]);
                let per_batch = nodes[bias.0].shape.len() == 2;
                if let Some(gx) = slot(nodes, local, *x) {
                    gx.iter_mut().zip(g).for_each(|(a, b)| *a += b);
                }
                if let Some(gb) = slot(nodes, local, *bias) {
                    for bi in 0..bsz {
                        for ci in 0..c {
                            let base = (bi * c + ci) * inner;
                            let s: f64 = g[base..base + inner].iter().sum();
                            gb[if per_batch { bi * c + ci } else { ci }] += s;
                        }
                    }
                }
            }
            Op::Act(kind, x) => {
                let vx = &nodes[x.0].value;
                let out = &node.value;
                if let Some(gx) = slot(nodes, local, *x) {
                    for j in 0..g.len() {
                        let d = match kind {
                            Activation::Relu => {
                                if vx[j] > 0.0 {
                                    1.0
                                } else {
                                    0.0
                                }
                            }
                            Activation::Silu => {
                                let s = sigmoid(vx[j]);
                                s + vx[j] * s * (1.0 - s)
                            }
                            Activation::Sigmoid => out[j] * (1.0 - out[j]),
                        };
                        gx[j] += g[j] * d;
                    }
                }
            }
            Op::Reduce { kind, x, axes } => {
                let sx = nodes[x.0].shape.clone();
                let (_, map) = reduce_map(&sx, axes);
                let count: usize = axes.iter().map(|&a| sx[a]).product();
                let f = if *kind == Reduction::Mean { 1.0 / count as f64 } else { 1.0 };
                if let Some(gx) = slot(nodes, local, *x) {
                    for (j, &o) in map.iter().enumerate() {
                        gx[j] += g[o] * f;
                    }
                }
            }
            Op::Mse { pred, target, weights } => {
                let (vp, vt) = (&nodes[pred.0].value, &nodes[target.0].value);
                let n = vp.len();
                let batch = nodes[pred.0].shape.first().copied().unwrap_or(1);
                let per = n / batch;
                let coef: Vec<f64> = (0..n)
                    .map(|j| {
                        let w = weights.as_ref().map_or(1.0, |w| w[j / per]);
                        2.0 * w * (vp[j] - vt[j]) / n as f64 * g[0]
                    })
                    .collect();
                if let Some(gp) = slot(nodes, local, *pred) {
                    gp.iter_mut().zip(&coef).for_each(|(a, c)| *a += c);
                }
                if let Some(gt) = slot(nodes, local, *target) {
                    gt.iter_mut().zip(&coef).for_each(|(a, c)| *a -= c);
                }
            }
            Op::DiceCe { logits, target, mix } => {
                let shape = nodes[logits.0].shape.clone();
                let vz = nodes[logits.0].value.clone();
                if let Some(gz) = slot(nodes, local, *logits) {
                    dice_ce_grad(&vz, target, &shape, *mix, g[0], gz);
                }
            }
            Op::Upsample2x(x) => {
                let s = &nodes[x.0].shape;
                let (bc, h, w) = (s[0] * s[1], s[2], s[3]);
                if let Some(gx) = slot(nodes, local, *x) {
                    for p in 0..bc {
                        for y in 0..2 * h {
                            for xx in 0..2 * w {
                                gx[(p * h + y / 2) * w + xx / 2] += g[(p * 2 * h + y) * 2 * w + xx];
                            }
                        }
                    }
                }
            }
            Op::ConcatChannels(parts) => {
                let s = &node.shape;
                let inner = numel(&s[2..]);
                let total_c = s[1];
                let mut offset = 0;
                for &p in parts {
                    let c = nodes[p.0].shape[1];
                    if let Some(gp) = slot(nodes, local, p) {
                        for b in 0..s[0] {
                            let src = &g[(b * total_c + offset) * inner..(b * total_c + offset + c) * inner];
                            gp[b * c * inner..(b + 1) * c * inner]
                                .iter_mut()
                                .zip(src)
                                .for_each(|(a, v)| *a += v);
                        }
                    }
                    offset += c;
                }
            }
            Op::FfParser { x, gate } => {
                let sx = &nodes[x.0].shape;
                let (b, c, hw) = (sx[0], sx[1], sx[2] * sx[3]);
                let dft = Dft2::new(sx[2], sx[3]);
                let vx = nodes[x.0].value.clone();
                let vg = nodes[gate.0].value.clone();
                if let Some(gx) = slot(nodes, local, *x) {
                    // The gated transform is a symmetric linear map of x.
                    for bi in 0..b {
                        for ci in 0..c {
                            let base = (bi * c + ci) * hw;
                            let back = dft.gated(&g[base..base + hw], &vg[ci * hw..(ci + 1) * hw]);
                            gx[base..base + hw].iter_mut().zip(back).for_each(|(a, v)| *a += v);
                        }
                    }
                }
                if let Some(gg) = slot(nodes, local, *gate) {
                    for bi in 0..b {
                        for ci in 0..c {
                            let base = (bi * c + ci) * hw;
                            dft.gate_grad(&vx[base..base + hw], &g[base..base + hw], &mut gg[ci * hw..(ci + 1) * hw]);
                        }
                    }
                }
            }
        }
    }
}

fn slot<'a>(nodes: &[Node], local: &'a mut [Option<Vec<f64>>], v: Var) -> Option<&'a mut Vec<f64>> {
    if !nodes[v.0].requires_grad {
        return None;
    }
    let n = nodes[v.0].value.len();
    Some(local[v.0].get_or_insert_with(|| vec![0.0; n]))
}

fn batch_split(shape: &[usize]) -> (usize, usize) {
    let n = numel(shape);
    let batch = if shape.len() >= 2 { shape[0] } else { 1 };
    (batch, n / batch)
}

fn dice_ce_value(z: &[f64], t: &[f64], shape: &[usize], mix: f64) -> f64 {
    let (batch, per) = batch_split(shape);
    let n = z.len() as f64;
    let ce: f64 = z.iter().zip(t).map(|(&z, &t)| softplus(z) - t * z).sum::<f64>() / n;
    let mut dice = 0.0;
    for b in 0..batch {
        let (mut inter, mut psum, mut tsum) = (0.0, 0.0, 0.0);
        for j in b * per..(b + 1) * per {
            let p = sigmoid(z[j]);
            inter += p * t[j];
            psum += p;
            tsum += t[j];
        }
        dice += 1.0 - (2.0 * inter + DICE_SMOOTH) / (psum + tsum + DICE_SMOOTH);
    }
    mix * dice / batch as f64 + (1.0 - mix) * ce
}

fn dice_ce_grad(z: &[f64], t: &[f64], shape: &[usize], mix: f64, upstream: f64, out: &mut [f64]) {
    let (batch, per) = batch_split(shape);
    let n = z.len() as f64;
    for b in 0..batch {
        let range = b * per..(b + 1) * per;
        let (mut inter, mut psum, mut tsum) = (0.0, 0.0, 0.0);
        for j in range.clone() {
            let p = sigmoid(z[j]);
            inter += p * t[j];
            psum += p;
            tsum += t[j];
        }
        let den = psum + tsum + DICE_SMOOTH;
        let num = 2.0 * inter + DICE_SMOOTH;
        for j in range {
            let p = sigmoid(z[j]);
            let d_dice_dp = -(2.0 * t[j] * den - num) / (den * den);
            let d_dice = mix * d_dice_dp * p * (1.0 - p) / batch as f64;
            let d_ce = (1.0 - mix) * (p - t[j]) / n;
            out[j] += upstream * (d_dice + d_ce);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::error::Error;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn add_values() {
        let mut g = Graph::new();
        let a = g.constant(t(&[2], &[1.0, 2.0]));
        let b = g.constant(t(&[2], &[3.0, 4.0]));
        let c = g.add(a, b).unwrap();
        assert_eq!(g.value(c), &[4.0, 6.0]);
    }

    #[test]
    fn square_gradient() {
        let mut g = Graph::new();
        let x = g.param(&Tensor::scalar(3.0));
        let y = g.mul(x, x).unwrap();
        g.backward(y).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[6.0]);
    }

    #[test]
    fn scale_by_zero() {
        let mut g = Graph::new();
        let x = g.param(&t(&[2], &[1.0, -1.0]));
        let y = g.scale(x, 0.0);
        assert_eq!(g.value(y), &[0.0, 0.0]);
        let s = g.sum_all(y);
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[0.0, 0.0]);
    }

    #[test]
    fn shape_mismatch_rejected() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::zeros(&[2]));
        let b = g.constant(Tensor::zeros(&[3]));
        assert!(matches!(g.add(a, b), Err(Error::Shape(_))));
        let m = g.constant(Tensor::zeros(&[2, 3]));
        assert!(matches!(g.matmul(m, m), Err(Error::Shape(_))));
        assert!(matches!(g.mse_loss(a, b), Err(Error::Shape(_))));
    }

    #[test]
    fn scalar_broadcast() {
        let mut g = Graph::new();
        let a = g.param(&t(&[3], &[1.0, 2.0, 3.0]));
        let b = g.param(&Tensor::scalar(2.0));
        let c = g.mul(a, b).unwrap();
        assert_eq!(g.value(c), &[2.0, 4.0, 6.0]);
        let s = g.sum_all(c);
        g.backward(s).unwrap();
        assert_eq!(g.grad(b).unwrap(), &[6.0]);
        assert_eq!(g.grad(a).unwrap(), &[2.0, 2.0, 2.0]);
    }

    #[test]
    fn matmul_values() {
        let mut g = Graph::new();
        let a = g.constant(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let b = g.constant(t(&[2, 1], &[1.0, 1.0]));
        let c = g.matmul(a, b).unwrap();
        assert_eq!(g.value(c), &[3.0, 7.0]);
        let eye = g.constant(t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]));
        let v = g.constant(t(&[2, 1], &[5.0, -2.0]));
        let r = g.matmul(eye, v).unwrap();
        assert_eq!(g.value(r), &[5.0, -2.0]);
    }

    #[test]
    fn conv_identity_and_window_sum() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::randn(&[1, 1, 4, 4], &mut rand::thread_rng()));
        let k = g.constant(Tensor::ones(&[1, 1, 1, 1]));
        let y = g.conv2d(x, k, 1, 0).unwrap();
        assert_eq!(g.value(y), g.value(x));

        let ones = g.constant(Tensor::ones(&[1, 1, 5, 5]));
        let k3 = g.constant(Tensor::ones(&[1, 1, 3, 3]));
        let s = g.conv2d(ones, k3, 1, 1).unwrap();
        assert_eq!(g.shape(s), &[1, 1, 5, 5]);
        for y in 1..4 {
            for x in 1..4 {
                assert_eq!(g.value(s)[y * 5 + x], 9.0);
            }
        }
        assert_eq!(g.value(s)[0], 4.0);
    }

    #[test]
    fn conv_non_integral_extent() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::zeros(&[1, 1, 4, 4]));
        let k = g.constant(Tensor::zeros(&[1, 1, 3, 3]));
        assert!(matches!(g.conv2d(x, k, 2, 0), Err(Error::Shape(_))));
    }

    #[test]
    fn activations_at_points() {
        let mut g = Graph::new();
        let z = g.param(&t(&[1], &[0.0]));
        let s = g.sigmoid(z);
        assert_eq!(g.value(s), &[0.5]);
        let x = g.param(&t(&[2], &[-2.0, 0.0]));
        let r = g.relu(x);
        assert_eq!(g.value(r), &[0.0, 0.0]);
        let total = g.sum_all(r);
        g.backward(total).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[0.0, 0.0]);
    }

    #[test]
    fn reductions() {
        let mut g = Graph::new();
        let x = g.param(&t(&[3], &[1.0, 2.0, 3.0]));
        let m = g.reduce(Reduction::Mean, x, &[0]).unwrap();
        assert_eq!(g.value(m), &[2.0]);
        g.backward(m).unwrap();
        for v in g.grad(x).unwrap() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
        let id = g.reduce(Reduction::Sum, x, &[]).unwrap();
        assert_eq!(g.value(id), g.value(x));
        assert_eq!(g.shape(id), &[3]);
        assert!(matches!(g.reduce(Reduction::Sum, x, &[1]), Err(Error::Shape(_))));
        assert!(matches!(g.reduce(Reduction::Sum, x, &[0, 0]), Err(Error::Shape(_))));
    }

    #[test]
    fn axis_reduction_keeps_other_axes() {
        let mut g = Graph::new();
        let x = g.constant(t(&[2, 3], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]));
        let rows = g.reduce(Reduction::Sum, x, &[1]).unwrap();
        assert_eq!(g.value(rows), &[6.0, 15.0]);
        let cols = g.reduce(Reduction::Mean, x, &[0]).unwrap();
        assert_eq!(g.value(cols), &[2.5, 3.5, 4.5]);
    }

    #[test]
    fn mse_values() {
        let mut g = Graph::new();
        let p = g.param(&t(&[2], &[0.0, 0.0]));
        let q = g.constant(t(&[2], &[1.0, 1.0]));
        let l = g.mse_loss(p, q).unwrap();
        assert_eq!(g.value(l), &[1.0]);
        let same = g.mse_loss(q, q).unwrap();
        assert_eq!(g.value(same), &[0.0]);
    }

    #[test]
    fn dice_ce_checks() {
        let mut g = Graph::new();
        let target = t(&[1, 4], &[1.0, 0.0, 1.0, 0.0]);
        let logits = g.param(&t(&[1, 4], &[40.0, -40.0, 40.0, -40.0]));
        let l = g.dice_ce_loss(logits, &target, 0.5).unwrap();
        assert!(g.value(l)[0] < 1e-12, "perfect logits give {}", g.value(l)[0]);

        let z = [0.3, -1.2, 2.0, 0.1];
        let zl = g.param(&t(&[1, 4], &z));
        let pure_ce = g.dice_ce_loss(zl, &target, 0.0).unwrap();
        let expect: f64 = z
            .iter()
            .zip(target.data())
            .map(|(&z, &t)| {
                let p = 1.0 / (1.0 + (-z).exp());
                -(t * p.ln() + (1.0 - t) * (1.0 - p).ln())
            })
            .sum::<f64>()
            / 4.0;
        assert!((g.value(pure_ce)[0] - expect).abs() < 1e-12);

        let bad = t(&[1, 4], &[0.5, 0.0, 1.0, 0.0]);
        assert!(matches!(g.dice_ce_loss(zl, &bad, 0.5), Err(Error::Data(_))));
    }

    #[test]
    fn backward_needs_scalar() {
        let mut g = Graph::new();
        let x = g.param(&Tensor::zeros(&[2]));
        assert!(matches!(g.backward(x), Err(Error::Shape(_))));
    }

    #[test]
    fn loss_is_leaf_and_disconnected_stays_zero() {
        let mut g = Graph::new();
        let x = g.param(&Tensor::scalar(1.5));
        let other = g.param(&Tensor::scalar(2.0));
        g.backward(x).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[1.0]);
        assert!(g.grad(other).is_none());
        let mut t = Tensor::scalar(2.0);
        g.write_grad(other, &mut t).unwrap();
        assert_eq!(t.grad().unwrap(), &[0.0]);
    }

    #[test]
    fn repeated_backward_accumulates() {
        let mut g = Graph::new();
        let x = g.param(&Tensor::scalar(3.0));
        let y = g.mul(x, x).unwrap();
        g.backward(y).unwrap();
        g.backward(y).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[12.0]);
        g.zero_grad();
        g.backward(y).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[6.0]);
    }

    #[test]
    fn upsample_and_concat() {
        let mut g = Graph::new();
        let a = g.constant(t(&[1, 1, 1, 2], &[1.0, 2.0]));
        let u = g.upsample2x(a).unwrap();
        assert_eq!(g.value(u), &[1.0, 1.0, 2.0, 2.0, 1.0, 1.0, 2.0, 2.0]);
        let b = g.constant(t(&[1, 2, 1, 2], &[3.0, 4.0, 5.0, 6.0]));
        let c = g.concat_channels(&[a, b]).unwrap();
        assert_eq!(g.shape(c), &[1, 3, 1, 2]);
        assert_eq!(g.value(c), &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
    }
}
