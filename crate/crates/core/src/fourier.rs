//! Naive separable 2-D discrete Fourier transform.
//!
//! Spatial extents here are at most 32, so the O(N²) per-axis form is fast
//! enough and keeps the adjoint relations used by the gate gradient exact.

use std::f64::consts::PI;

/// Precomputed twiddle tables for an `h × w` transform.
#[derive(Clone, Debug)]
pub struct Dft2 {
    h: usize,
    w: usize,
    cos_h: Vec<f64>,
    sin_h: Vec<f64>,
    cos_w: Vec<f64>,
    sin_w: Vec<f64>,
}

fn table(n: usize) -> (Vec<f64>, Vec<f64>) {
    (0..n)
        .map(|k| {
            let a = 2.0 * PI * k as f64 / n as f64;
            (a.cos(), a.sin())
        })
        .unzip()
}

impl Dft2 {
    pub fn new(h: usize, w: usize) -> Self {
        let (cos_h, sin_h) = table(h);
        let (cos_w, sin_w) = table(w);
        Dft2 { h, w, cos_h, sin_h, cos_w, sin_w }
    }

    pub fn len(&self) -> usize {
        self.h * self.w
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Complex transform with kernel `exp(sign · 2πi · k·n / N)`, unnormalized.
    fn transform(&self, re: &[f64], im: &[f64], sign: f64) -> (Vec<f64>, Vec<f64>) {
        let (h, w) = (self.h, self.w);
        let mut ar = vec![0.0; h * w];
        let mut ai = vec![0.0; h * w];
        for r in 0..h {
            let row_re = &re[r * w..(r + 1) * w];
            let row_im = &im[r * w..(r + 1) * w];
            for k in 0..w {
                let (mut sr, mut si) = (0.0, 0.0);
                for n in 0..w {
                    let idx = (k * n) % w;
                    let (c, s) = (self.cos_w[idx], sign * self.sin_w[idx]);
                    sr += row_re[n] * c - row_im[n] * s;
                    si += row_re[n] * s + row_im[n] * c;
                }
                ar[r * w + k] = sr;
                ai[r * w + k] = si;
            }
        }
        let mut or = vec![0.0; h * w];
        let mut oi = vec![0.0; h * w];
        for k in 0..h {
            for n in 0..h {
                let idx = (k * n) % h;
                let (c, s) = (self.cos_h[idx], sign * self.sin_h[idx]);
                for col in 0..w {
                    let (xr, xi) = (ar[n * w + col], ai[n * w + col]);
                    or[k * w + col] += xr * c - xi * s;
                    oi[k * w + col] += xr * s + xi * c;
                }
            }
        }
        (or, oi)
    }

    /// Forward transform of a real `h × w` map.
    pub fn forward_real(&self, x: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let zeros = vec![0.0; x.len()];
        self.transform(x, &zeros, -1.0)
    }

    /// Real part of the normalized inverse transform.
    pub fn inverse_real(&self, re: &[f64], im: &[f64]) -> Vec<f64> {
        let n = self.len() as f64;
        let (or, _) = self.transform(re, im, 1.0);
        or.into_iter().map(|v| v / n).collect()
    }

    /// `Re(IDFT(gate ⊙ DFT(x)))` for one channel.
    pub fn gated(&self, x: &[f64], gate: &[f64]) -> Vec<f64> {
        let (mut re, mut im) = self.forward_real(x);
        for ((r, i), g) in re.iter_mut().zip(im.iter_mut()).zip(gate) {
            *r *= g;
            *i *= g;
        }
        self.inverse_real(&re, &im)
    }

    /// Gradient of `<gout, gated(x, gate)>` with respect to the gate.
    pub fn gate_grad(&self, x: &[f64], gout: &[f64], acc: &mut [f64]) {
        let n = self.len() as f64;
        let (xr, xi) = self.forward_real(x);
        let (gr, gi) = self.forward_real(gout);
        for k in 0..acc.len() {
            // Re(X · conj(G))
            acc[k] += (xr[k] * gr[k] + xi[k] * gi[k]) / n;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn roundtrip_16x16() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let dft = Dft2::new(16, 16);
        let x: Vec<f64> = (0..256).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let (re, im) = dft.forward_real(&x);
        let back = dft.inverse_real(&re, &im);
        let err = x.iter().zip(&back).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        assert!(err < 1e-8, "roundtrip error {err}");
    }

    #[test]
    fn dc_component_is_sum() {
        let dft = Dft2::new(4, 8);
        let x: Vec<f64> = (0..32).map(|v| v as f64).collect();
        let (re, im) = dft.forward_real(&x);
        assert!((re[0] - x.iter().sum::<f64>()).abs() < 1e-9);
        assert!(im[0].abs() < 1e-9);
    }
}
