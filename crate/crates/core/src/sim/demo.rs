//! The naive deconvolution-weighted regression estimator and what it converges to.
//!
//! With `Y = X^2 + eps`, `X = Z + eta`, `Z ~ N(0,1)`, the estimator
//! `J_n(x) = sum K_bar(x, Z_i) Y_i / sum K_bar(x, Z_i)`,
//! `K_bar(x, z) = int K(u) f_eta(x - z + h u) du`,
//! tracks `J(x) = E[H(Z) | X = x]` rather than `mu(x) = x^2`.

use serde::{Deserialize, Serialize};

use crate::model::QuadratureRule;
use crate::numeric::sample_variance;
use crate::rng::Stream;
use crate::smooth::{Kernel, KernelKind};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DemoOptions {
    pub interval: (f64, f64),
    pub nodes: usize,
    /// Bandwidth; the normal-reference rule `2.345 s_Z n^{-1/5}` when `None`.
    pub h: Option<f64>,
    pub sigma_eps2: f64,
    pub sigma_eta2: f64,
    /// Gauss-Legendre nodes for the convolution `K_bar`.
    pub kernel_nodes: usize,
}

impl Default for DemoOptions {
    fn default() -> Self {
        Self { interval: (-2.0, 2.0), nodes: 201, h: None, sigma_eps2: 0.01, sigma_eta2: 0.05, kernel_nodes: 20 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub x: f64,
    pub j_hat: f64,
    pub j: f64,
    pub mu: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NaiveDemo {
    pub n: usize,
    pub seed: u64,
    pub h: f64,
    /// `(int (J_n - J)^2 dx)^{1/2}` over the reporting interval.
    pub l2_to_j: f64,
    /// `(int (J_n - mu)^2 dx)^{1/2}` over the reporting interval.
    pub l2_to_mu: f64,
    pub curves: Vec<CurvePoint>,
}

/// `J(x) = x^2 / (1+s)^2 + s / (1+s) + s` for `eta ~ N(0, s)`, `Z ~ N(0, 1)`.
pub fn j_limit(x: f64, sigma_eta2: f64) -> f64 {
    let s = sigma_eta2;
    x * x / ((1.0 + s) * (1.0 + s)) + s / (1.0 + s) + s
}

pub fn naive_j_demo(n: usize, seed: u64, opts: &DemoOptions) -> NaiveDemo {
    let mut rng = Stream::new(seed);
    let sd_eta = opts.sigma_eta2.sqrt();
    let sd_eps = opts.sigma_eps2.sqrt();
    let mut z = Vec::with_capacity(n);
    let mut y = Vec::with_capacity(n);
    for _ in 0..n {
        let zi = rng.standard_normal();
        let x = zi + sd_eta * rng.standard_normal();
        z.push(zi);
        y.push(x * x + sd_eps * rng.standard_normal());
    }

    let h = opts.h.unwrap_or_else(|| 2.345 * sample_variance(&z).sqrt() * (n as f64).powf(-0.2));
    let kernel = Kernel { kind: KernelKind::Epanechnikov, d: 1 };
    let gl = QuadratureRule::gauss_legendre(opts.kernel_nodes, -1.0, 1.0);
    let kbar = |x: f64, zi: f64| -> f64 {
        if sd_eta == 0.0 {
            return kernel.eval(&[(x - zi) / h]) / h;
        }
        gl.integrate(|u| kernel.eval(u) * normal_density(x - zi + h * u[0], sd_eta))
    };

    let (lo, hi) = opts.interval;
    let step = (hi - lo) / opts.nodes as f64;
    let mut curves = Vec::with_capacity(opts.nodes);
    let mut dj = 0.0;
    let mut dmu = 0.0;
    for k in 0..opts.nodes {
        let x = lo + (k as f64 + 0.5) * step;
        let (mut num, mut den) = (0.0, 0.0);
        for (zi, yi) in z.iter().zip(&y) {
            let w = kbar(x, *zi);
            num += w * yi;
            den += w;
        }
        let j_hat = if den > 0.0 { num / den } else { f64::NAN };
        let j = j_limit(x, opts.sigma_eta2);
        let mu = x * x;
        dj += step * (j_hat - j).powi(2);
        dmu += step * (j_hat - mu).powi(2);
        curves.push(CurvePoint { x, j_hat, j, mu });
    }
    NaiveDemo { n, seed, h, l2_to_j: dj.sqrt(), l2_to_mu: dmu.sqrt(), curves }
}

fn normal_density(x: f64, sd: f64) -> f64 {
    (-0.5 * (x / sd).powi(2)).exp() / (sd * (2.0 * std::f64::consts::PI).sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn limit_coefficients() {
        // Z | X = x ~ N(x / 1.05, 0.05 / 1.05), plus E[eta^2] = 0.05
        let slope = j_limit(1.0, 0.05) - j_limit(0.0, 0.05);
        assert!((slope - 0.907).abs() < 5e-4);
        assert!((j_limit(0.0, 0.05) - 0.0976).abs() < 5e-5);
        assert_eq!(j_limit(1.7, 0.0), 1.7 * 1.7);
    }

    #[test]
    fn estimator_tracks_j() {
        let demo = naive_j_demo(500, 1, &DemoOptions::default());
        assert!(demo.l2_to_j < demo.l2_to_mu, "{} vs {}", demo.l2_to_j, demo.l2_to_mu);
        assert_eq!(demo.curves.len(), 201);
    }

    #[test]
    fn no_measurement_error_targets_mu() {
        let opts = DemoOptions { sigma_eta2: 0.0, ..Default::default() };
        let demo = naive_j_demo(300, 2, &opts);
        assert!(demo.curves.iter().all(|c| c.j == c.mu));
    }
}
