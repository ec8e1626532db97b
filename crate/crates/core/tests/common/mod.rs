#![allow(dead_code)]

use diffseg::{Graph, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const FD_STEP: f64 = 1e-5;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform(shape: &[usize], lo: f64, hi: f64, r: &mut ChaCha8Rng) -> Tensor {
    let n: usize = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| r.gen_range(lo..hi)).collect()).unwrap()
}

/// Relative error with a small absolute floor on the denominator.
pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6)
}

/// Largest relative error between the graph's gradients and central
/// differences of the scalar built by `f`, over the listed input elements
/// (`None` means every element).
pub fn fd_max_rel_err<F>(inputs: &[Tensor], probe: Option<&[Vec<usize>]>, f: F) -> f64
where
    F: Fn(&mut Graph, &[Var]) -> Var,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t)).collect();
    let out = f(&mut g, &vars);
    g.backward(out).unwrap();
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .zip(inputs)
        .map(|(v, t)| g.grad(*v).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; t.len()]))
        .collect();

    let eval = |ins: &[Tensor]| -> f64 {
        let mut g = Graph::new();
        let vars: Vec<Var> = ins.iter().map(|t| g.param(t)).collect();
        let out = f(&mut g, &vars);
        g.value(out)[0]
    };

    let mut worst: f64 = 0.0;
    for (k, input) in inputs.iter().enumerate() {
        let indices: Vec<usize> = match probe {
            Some(p) => p[k].clone(),
            None => (0..input.len()).collect(),
        };
        for i in indices {
            let mut plus = inputs.to_vec();
            plus[k].data_mut()[i] += FD_STEP;
            let mut minus = inputs.to_vec();
            minus[k].data_mut()[i] -= FD_STEP;
            let numeric = (eval(&plus) - eval(&minus)) / (2.0 * FD_STEP);
            worst = worst.max(rel_err(analytic[k][i], numeric));
        }
    }
    worst
}

/// `sum(out ⊙ proj)` for a fixed random projection, turning any output into a scalar.
pub fn project(g: &mut Graph, out: Var, seed: u64) -> Var {
    let shape = g.shape(out).to_vec();
    let mut r = rng(seed);
    let w = g.constant(uniform(&shape, -1.0, 1.0, &mut r));
    let prod = g.mul(out, w).unwrap();
    g.sum_all(prod)
}

/// `count` distinct random indices below `len` (all of them if `len <= count`).
pub fn sample_indices(len: usize, count: usize, r: &mut ChaCha8Rng) -> Vec<usize> {
    if len <= count {
        return (0..len).collect();
    }
    let mut picked = std::collections::BTreeSet::new();
    while picked.len() < count {
        picked.insert(r.gen_range(0..len));
    }
    picked.into_iter().collect()
}

/// Finite-difference sweep over every differentiable primitive, one
/// composite chain and a forward pass of each denoiser variant. Returns
/// `(name, max relative error, tolerance)`.
pub fn gradient_sweep() -> Vec<(String, f64, f64)> {
    use diffseg::autodiff::{Activation, Elementwise, Reduction};
    use diffseg::diffusion::Target;
    use diffseg::model::{DenoiserModel, ModelConfig, Variant};

    let mut out = Vec::new();
    let mut r = rng(100);
    let a = uniform(&[3, 4], -2.0, 2.0, &mut r);
    let b = uniform(&[3, 4], -2.0, 2.0, &mut r);
    for kind in [Elementwise::Add, Elementwise::Sub, Elementwise::Mul] {
        let e = fd_max_rel_err(&[a.clone(), b.clone()], None, |g, v| {
            let c = g.elementwise(kind, v[0], v[1]).unwrap();
            project(g, c, 1)
        });
        out.push((format!("{kind:?}").to_lowercase(), e, 1e-4));
    }
    let e = fd_max_rel_err(&[a.clone()], None, |g, v| {
        let c = g.scale(v[0], -1.7);
        project(g, c, 2)
    });
    out.push(("scale".into(), e, 1e-4));
    let m = uniform(&[4, 3], -1.0, 1.0, &mut r);
    let e = fd_max_rel_err(&[a.clone(), m], None, |g, v| {
        let c = g.matmul(v[0], v[1]).unwrap();
        project(g, c, 3)
    });
    out.push(("matmul".into(), e, 1e-4));
    for (stride, pad, ks, n) in [(1, 1, 3, 6), (2, 1, 3, 5), (2, 0, 2, 6)] {
        let x = uniform(&[2, 2, n, n], -1.0, 1.0, &mut r);
        let k = uniform(&[3, 2, ks, ks], -1.0, 1.0, &mut r);
        let e = fd_max_rel_err(&[x, k], None, |g, v| {
            let c = g.conv2d(v[0], v[1], stride, pad).unwrap();
            project(g, c, 4)
        });
        out.push((format!("conv2d s{stride} p{pad}"), e, 1e-4));
    }
    // inputs kept away from the relu kink
    let x = Tensor::from_vec((0..12).map(|i| if i % 2 == 0 { 0.2 + 0.1 * i as f64 } else { -0.15 * i as f64 }).collect());
    for kind in [Activation::Relu, Activation::Sigmoid, Activation::Silu] {
        let e = fd_max_rel_err(&[x.clone()], None, |g, v| {
            let y = g.activation(kind, v[0]);
            project(g, y, 5)
        });
        out.push((format!("{kind:?}").to_lowercase(), e, 1e-4));
    }
    let x3 = uniform(&[2, 3, 4], -1.0, 1.0, &mut r);
    for kind in [Reduction::Sum, Reduction::Mean] {
        let e = fd_max_rel_err(&[x3.clone()], None, |g, v| {
            let y = g.reduce(kind, v[0], &[1]).unwrap();
            project(g, y, 6)
        });
        out.push((format!("{kind:?} over axis").to_lowercase(), e, 1e-4));
    }
    let c1 = uniform(&[2, 2, 3, 3], -1.0, 1.0, &mut r);
    let c2 = uniform(&[2, 1, 3, 3], -1.0, 1.0, &mut r);
    let bias = uniform(&[2, 3], -1.0, 1.0, &mut r);
    let e = fd_max_rel_err(&[c1, c2, bias], None, |g, v| {
        let c = g.concat_channels(&[v[0], v[1]]).unwrap();
        let c = g.add_channel(c, v[2]).unwrap();
        let u = g.upsample2x(c).unwrap();
        project(g, u, 7)
    });
    out.push(("concat/add_channel/upsample".into(), e, 1e-4));
    let t = uniform(&[3, 4], -1.0, 1.0, &mut r);
    let e = fd_max_rel_err(&[a.clone(), t.clone()], None, |g, v| g.mse_loss(v[0], v[1]).unwrap());
    out.push(("mse".into(), e, 1e-4));
    let e = fd_max_rel_err(&[a.clone(), t], None, |g, v| g.weighted_mse_loss(v[0], v[1], Some(vec![0.3, 1.0, 2.2])).unwrap());
    out.push(("weighted mse".into(), e, 1e-4));
    let z = uniform(&[2, 1, 4, 4], -3.0, 3.0, &mut r);
    let target = Tensor::new(vec![2, 1, 4, 4], (0..32).map(|i| ((i * 7) % 3 == 0) as u8 as f64).collect()).unwrap();
    let e = fd_max_rel_err(&[z], None, |g, v| g.dice_ce_loss(v[0], &target, 0.5).unwrap());
    out.push(("dice_ce".into(), e, 1e-4));
    let f = uniform(&[1, 2, 8, 8], -1.0, 1.0, &mut r);
    let gate = uniform(&[2, 8, 8], 0.0, 2.0, &mut r);
    let e = fd_max_rel_err(&[f, gate], None, |g, v| {
        let y = g.ff_parser(v[0], v[1]).unwrap();
        project(g, y, 8)
    });
    out.push(("ff_parser".into(), e, 1e-4));

    let x = uniform(&[2, 2, 6, 6], -1.0, 1.0, &mut r);
    let k1 = uniform(&[3, 2, 3, 3], -1.0, 1.0, &mut r);
    let k2 = uniform(&[1, 3, 3, 3], -1.0, 1.0, &mut r);
    let e = fd_max_rel_err(&[x, k1, k2], None, |g, v| {
        let h = g.conv2d(v[0], v[1], 1, 1).unwrap();
        let h = g.silu(h);
        let h = g.conv2d(h, v[2], 1, 1).unwrap();
        g.mean_all(h)
    });
    out.push(("composite conv-silu-conv".into(), e, 1e-3));
    for variant in Variant::ALL {
        let cfg = ModelConfig { variant, base_channels: 2, depth: 2, time_embed_dim: 4, image_channels: 1, size: 8 };
        let model = DenoiserModel::build(cfg, Target::Eps, 50, &mut r).unwrap();
        let x = Tensor::randn(&[2, 1, 8, 8], &mut r);
        let y = Tensor::randn(&[2, 1, 8, 8], &mut r);
        let probe: Vec<Vec<usize>> = model.params().iter().map(|p| sample_indices(p.len(), 4, &mut r)).collect();
        let e = fd_max_rel_err(model.params(), Some(&probe), |g, vars| {
            let bound = model.bind_vars(vars.to_vec()).unwrap();
            let xv = g.constant(x.clone());
            let yv = g.constant(y.clone());
            let out = model.forward(g, &bound, xv, &[3, 41], Some(yv)).unwrap();
            g.mean_all(out)
        });
        out.push((format!("denoiser {variant}"), e, 1e-3));
    }
    out
}
