//! Parametric regression families and the Berkson calibration
//! `H_theta(z) = E[m_theta(z + eta)]` under known Gaussian noise.
//!
//! Calibration uses a family's closed form when it has one and otherwise a
//! tensor-product Gauss-Hermite rule matched to the noise covariance.

pub mod quadrature;

use std::collections::BTreeMap;
use std::fmt;
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::rng::Stream;
pub use quadrature::{QuadratureRule, RuleKind};

/// Default Gauss-Hermite nodes per noise coordinate.
pub const DEFAULT_HERMITE_NODES: usize = 30;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NoiseKind {
    /// Mean-zero Gaussian with diagonal covariance. This is the only
    /// supported law; new kinds need their own quadrature rule.
    Gaussian,
}

/// The known law of the Berkson error `eta` in `X = Z + eta`.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSpec {
    kind: NoiseKind,
    variances: Vec<f64>,
}

impl NoiseSpec {
    pub fn gaussian(variances: Vec<f64>) -> Result<Self> {
        if variances.is_empty() {
            return Err(Error::InvalidInput("noise dimension must be at least 1".into()));
        }
        if variances.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
            return Err(Error::InvalidInput(format!("noise variances must be finite and >= 0, got {variances:?}")));
        }
        Ok(Self { kind: NoiseKind::Gaussian, variances })
    }

    pub fn isotropic(d: usize, variance: f64) -> Result<Self> {
        Self::gaussian(vec![variance; d])
    }

    pub fn kind(&self) -> NoiseKind {
        self.kind
    }

    pub fn dim(&self) -> usize {
        self.variances.len()
    }

    pub fn variances(&self) -> &[f64] {
        &self.variances
    }

    pub fn std_dev(&self, j: usize) -> f64 {
        self.variances[j].sqrt()
    }

    /// Density of `eta` at `x`. Only defined when every variance is positive.
    pub fn density(&self, x: &[f64]) -> f64 {
        self.variances
            .iter()
            .zip(x)
            .map(|(&v, &xi)| (-0.5 * xi * xi / v).exp() / (2.0 * std::f64::consts::PI * v).sqrt())
            .product()
    }

    /// Gauss-Hermite rule for `E[f(eta)]` with `m` nodes per coordinate.
    /// Zero-variance coordinates collapse to the single node 0.
    pub fn hermite_rule(&self, m: usize) -> QuadratureRule {
        let base = QuadratureRule::gauss_hermite(m);
        let mut rule: Option<QuadratureRule> = None;
        for j in 0..self.dim() {
            let sd = self.std_dev(j);
            let axis = if sd == 0.0 {
                QuadratureRule::new(vec![0.0], vec![1.0], 1, RuleKind::GaussHermite).expect("valid rule")
            } else {
                let nodes: Vec<f64> = base.nodes().iter().map(|x| sd * x).collect();
                QuadratureRule::new(nodes, base.weights().to_vec(), 1, RuleKind::GaussHermite).expect("valid rule")
            };
            rule = Some(match rule {
                None => axis,
                Some(r) => r.tensor(&axis),
            });
        }
        rule.expect("dimension >= 1")
    }
}

/// Compact box of admissible parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamBox {
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
}

impl ParamBox {
    pub fn new(lower: Vec<f64>, upper: Vec<f64>) -> Result<Self> {
        if lower.len() != upper.len() || lower.iter().zip(&upper).any(|(l, u)| !(l < u)) {
            return Err(Error::InvalidInput(format!("invalid parameter box {lower:?} .. {upper:?}")));
        }
        Ok(Self { lower, upper })
    }

    pub fn symmetric(q: usize, radius: f64) -> Self {
        Self { lower: vec![-radius; q], upper: vec![radius; q] }
    }

    pub fn dim(&self) -> usize {
        self.lower.len()
    }

    pub fn contains(&self, theta: &[f64]) -> bool {
        theta.len() == self.dim() && theta.iter().zip(&self.lower).zip(&self.upper).all(|((t, l), u)| l <= t && t <= u)
    }

    pub fn is_interior(&self, theta: &[f64]) -> bool {
        theta.len() == self.dim() && theta.iter().zip(&self.lower).zip(&self.upper).all(|((t, l), u)| l < t && t < u)
    }

    pub fn clamp(&self, theta: &mut [f64]) {
        for ((t, l), u) in theta.iter_mut().zip(&self.lower).zip(&self.upper) {
            *t = t.clamp(*l, *u);
        }
    }
}

pub type MeanFn = Arc<dyn Fn(&[f64], &[f64]) -> f64 + Send + Sync>;
/// Writes `d m_theta(x) / d theta` into the output slice.
pub type GradFn = Arc<dyn Fn(&[f64], &[f64], &mut [f64]) + Send + Sync>;
/// Closed-form `H_theta(z)`; fills `H_dot` when a slice is supplied.
pub type CalibrationFn = Arc<dyn Fn(&[f64], &[f64], &NoiseSpec, Option<&mut [f64]>) -> f64 + Send + Sync>;

/// A parametric regression family `m_theta(x)`.
///
/// Custom families are built with [`ModelFamily::new`] and the `with_*`
/// builders, and can be made available by name through [`FamilyRegistry`].
#[derive(Clone)]
pub struct ModelFamily {
    name: String,
    q: usize,
    d: usize,
    mean_fn: MeanFn,
    grad_fn: Option<GradFn>,
    analytic: Option<CalibrationFn>,
    region: ParamBox,
    linear_in_params: bool,
}

impl fmt::Debug for ModelFamily {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("ModelFamily")
            .field("name", &self.name)
            .field("q", &self.q)
            .field("d", &self.d)
            .field("gradient", &self.grad_fn.is_some())
            .field("analytic", &self.analytic.is_some())
            .field("region", &self.region)
            .finish()
    }
}

impl ModelFamily {
    pub fn new(name: impl Into<String>, q: usize, d: usize, mean_fn: MeanFn) -> Self {
        Self {
            name: name.into(),
            q,
            d,
            mean_fn,
            grad_fn: None,
            analytic: None,
            region: ParamBox::symmetric(q, 10.0),
            linear_in_params: false,
        }
    }

    pub fn with_gradient(mut self, grad: GradFn) -> Self {
        self.grad_fn = Some(grad);
        self
    }

    pub fn with_calibration(mut self, calib: CalibrationFn) -> Self {
        self.analytic = Some(calib);
        self
    }

    pub fn with_region(mut self, region: ParamBox) -> Self {
        self.region = region;
        self
    }

    /// Marks `m_theta(x) = theta' gamma(x)`, which enables a least-squares start.
    pub fn linear_in_params(mut self, yes: bool) -> Self {
        self.linear_in_params = yes;
        self
    }

    /// Same family with the closed-form calibration removed, forcing quadrature.
    pub fn without_calibration(mut self) -> Self {
        self.analytic = None;
        self
    }

    pub fn without_gradient(mut self) -> Self {
        self.grad_fn = None;
        self
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn param_dim(&self) -> usize {
        self.q
    }

    pub fn design_dim(&self) -> usize {
        self.d
    }

    pub fn region(&self) -> &ParamBox {
        &self.region
    }

    pub fn is_linear_in_params(&self) -> bool {
        self.linear_in_params
    }

    pub fn has_gradient(&self) -> bool {
        self.grad_fn.is_some()
    }

    pub fn has_analytic_calibration(&self) -> bool {
        self.analytic.is_some()
    }

    pub fn mean(&self, theta: &[f64], x: &[f64]) -> f64 {
        (self.mean_fn)(theta, x)
    }

    pub fn gradient(&self, theta: &[f64], x: &[f64], out: &mut [f64]) -> bool {
        match &self.grad_fn {
            Some(g) => {
                g(theta, x, out);
                true
            }
            None => false,
        }
    }

    /// `m(x) = theta * x`, `H(z) = theta * z`.
    pub fn linear_1d() -> Self {
        Self::new("linear-1d", 1, 1, Arc::new(|t: &[f64], x: &[f64]| t[0] * x[0]))
            .with_gradient(Arc::new(|_t: &[f64], x: &[f64], g: &mut [f64]| g[0] = x[0]))
            .with_calibration(Arc::new(|t: &[f64], z: &[f64], _n: &NoiseSpec, hdot: Option<&mut [f64]>| {
                if let Some(g) = hdot {
                    g[0] = z[0];
                }
                t[0] * z[0]
            }))
            .linear_in_params(true)
    }

    /// `m(x) = theta_1 x_1 + exp(theta_2 x_2)`, with
    /// `H(z) = theta_1 z_1 + exp(theta_2 z_2 + sigma_2^2 theta_2^2 / 2)`.
    pub fn case2_2d() -> Self {
        Self::new("case2-2d", 2, 2, Arc::new(|t: &[f64], x: &[f64]| t[0] * x[0] + (t[1] * x[1]).exp()))
            .with_gradient(Arc::new(|t: &[f64], x: &[f64], g: &mut [f64]| {
                g[0] = x[0];
                g[1] = x[1] * (t[1] * x[1]).exp();
            }))
            .with_calibration(Arc::new(|t: &[f64], z: &[f64], noise: &NoiseSpec, hdot: Option<&mut [f64]>| {
                let v2 = noise.variances()[1];
                let e = (t[1] * z[1] + 0.5 * v2 * t[1] * t[1]).exp();
                if let Some(g) = hdot {
                    g[0] = z[0];
                    g[1] = (z[1] + v2 * t[1]) * e;
                }
                t[0] * z[0] + e
            }))
            .with_region(ParamBox::new(vec![-10.0, -5.0], vec![10.0, 5.0]).expect("valid box"))
    }

    /// Polynomial `sum_{k < terms} theta_k x^k` in one variable.
    pub fn poly_1d(terms: usize) -> Result<Self> {
        if terms == 0 {
            return Err(Error::Config("poly-1d needs at least one coefficient".into()));
        }
        Ok(Self::new(
            format!("poly-1d({terms})"),
            terms,
            1,
            Arc::new(|t: &[f64], x: &[f64]| t.iter().rev().fold(0.0, |acc, c| acc * x[0] + c)),
        )
        .with_gradient(Arc::new(|_t: &[f64], x: &[f64], g: &mut [f64]| {
            let mut p = 1.0;
            for gk in g.iter_mut() {
                *gk = p;
                p *= x[0];
            }
        }))
        .with_calibration(Arc::new(move |t: &[f64], z: &[f64], noise: &NoiseSpec, hdot: Option<&mut [f64]>| {
            let moments = gaussian_power_moments(z[0], noise.variances()[0], t.len());
            if let Some(g) = hdot {
                g.copy_from_slice(&moments);
            }
            t.iter().zip(&moments).map(|(a, m)| a * m).sum()
        }))
        .with_region(ParamBox::symmetric(terms, 100.0))
        .linear_in_params(true))
    }

    /// `m(x) = theta`, constant in `x`.
    pub fn constant(d: usize) -> Self {
        Self::new("constant", 1, d, Arc::new(|t: &[f64], _x: &[f64]| t[0]))
            .with_gradient(Arc::new(|_t: &[f64], _x: &[f64], g: &mut [f64]| g[0] = 1.0))
            .with_calibration(Arc::new(|t: &[f64], _z: &[f64], _n: &NoiseSpec, hdot: Option<&mut [f64]>| {
                if let Some(g) = hdot {
                    g[0] = 1.0;
                }
                t[0]
            }))
            .linear_in_params(true)
    }
}

/// `E[(z + eta)^k]` for `k < count`, `eta ~ N(0, var)`.
fn gaussian_power_moments(z: f64, var: f64, count: usize) -> Vec<f64> {
    // eta moments: E eta^(2m) = var^m (2m-1)!!
    let mut eta = vec![0.0; count.max(1)];
    eta[0] = 1.0;
    for j in (2..count).step_by(2) {
        eta[j] = eta[j - 2] * var * (j - 1) as f64;
    }
    let mut out = vec![0.0; count];
    for (k, o) in out.iter_mut().enumerate() {
        let mut binom = 1.0;
        let mut s = 0.0;
        for (j, e) in eta.iter().enumerate().take(k + 1) {
            if j % 2 == 0 {
                s += binom * z.powi((k - j) as i32) * e;
            }
            binom = binom * (k - j) as f64 / (j + 1) as f64;
        }
        *o = s;
    }
    out
}

type FamilyBuilder = Arc<dyn Fn(Option<usize>) -> Result<ModelFamily> + Send + Sync>;

/// Name-based lookup of model families; the built-ins are
/// `linear-1d`, `case2-2d`, `poly-1d` (needs a term count) and `constant-1d`.
#[derive(Clone)]
pub struct FamilyRegistry {
    builders: BTreeMap<String, FamilyBuilder>,
}

impl Default for FamilyRegistry {
    fn default() -> Self {
        let mut reg = Self { builders: BTreeMap::new() };
        reg.register("linear-1d", Arc::new(|_| Ok(ModelFamily::linear_1d())));
        reg.register("case2-2d", Arc::new(|_| Ok(ModelFamily::case2_2d())));
        reg.register(
            "poly-1d",
            Arc::new(|terms| {
                let terms = terms.ok_or_else(|| Error::Config("terms: required for poly-1d".into()))?;
                ModelFamily::poly_1d(terms)
            }),
        );
        reg.register("constant-1d", Arc::new(|_| Ok(ModelFamily::constant(1))));
        reg
    }
}

impl FamilyRegistry {
    pub fn register(&mut self, name: &str, builder: FamilyBuilder) {
        self.builders.insert(name.to_string(), builder);
    }

    pub fn names(&self) -> Vec<&str> {
        self.builders.keys().map(String::as_str).collect()
    }

    pub fn build(&self, name: &str, terms: Option<usize>) -> Result<ModelFamily> {
        let builder = self
            .builders
            .get(name)
            .ok_or_else(|| Error::Config(format!("unknown model '{name}' (known: {})", self.names().join(", "))))?;
        builder(terms)
    }
}

/// Settings for the derivative `H_dot` when a family lacks closed forms.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CalibrationOptions {
    pub hermite_nodes: usize,
    /// Allow central finite differences of `H` when no gradient is known.
    pub finite_differences: bool,
}

impl Default for CalibrationOptions {
    fn default() -> Self {
        Self { hermite_nodes: DEFAULT_HERMITE_NODES, finite_differences: true }
    }
}

fn check_dims(model: &ModelFamily, noise: &NoiseSpec, theta: &[f64], z: &[f64]) -> Result<()> {
    if theta.len() != model.q || z.len() != model.d || noise.dim() != model.d {
        return Err(Error::InvalidInput(format!(
            "dimension mismatch: model {} has q={}, d={}; got theta of length {}, z of length {}, noise of dimension {}",
            model.name,
            model.q,
            model.d,
            theta.len(),
            z.len(),
            noise.dim()
        )));
    }
    Ok(())
}

fn calibration_error(theta: &[f64], z: &[f64]) -> Error {
    Error::Calibration { theta: theta.to_vec(), z: z.to_vec() }
}

/// `E[m_theta(z + eta)]` by the quadrature `rule`, ignoring any closed form.
pub fn quadrature_h(model: &ModelFamily, theta: &[f64], z: &[f64], rule: &QuadratureRule) -> Result<f64> {
    let mut x = vec![0.0; z.len()];
    let mut total = 0.0;
    for (k, &w) in rule.weights().iter().enumerate() {
        for ((xj, zj), ej) in x.iter_mut().zip(z).zip(rule.node(k)) {
            *xj = zj + ej;
        }
        let m = model.mean(theta, &x);
        if !m.is_finite() {
            return Err(calibration_error(theta, z));
        }
        total += w * m;
    }
    Ok(total)
}

/// `H_theta(z) = E[m_theta(z + eta)]`.
pub fn calibrate_h(model: &ModelFamily, noise: &NoiseSpec, theta: &[f64], z: &[f64], rule: &QuadratureRule) -> Result<f64> {
    check_dims(model, noise, theta, z)?;
    let h = match &model.analytic {
        Some(f) => f(theta, z, noise, None),
        None => quadrature_h(model, theta, z, rule)?,
    };
    if h.is_finite() {
        Ok(h)
    } else {
        Err(calibration_error(theta, z))
    }
}

/// `H_dot_theta(z) = E[grad_theta m_theta(z + eta)]`.
pub fn calibrate_hdot(
    model: &ModelFamily,
    noise: &NoiseSpec,
    theta: &[f64],
    z: &[f64],
    rule: &QuadratureRule,
    opts: &CalibrationOptions,
) -> Result<Vec<f64>> {
    check_dims(model, noise, theta, z)?;
    let mut out = vec![0.0; model.q];
    if let Some(f) = &model.analytic {
        f(theta, z, noise, Some(&mut out));
    } else if let Some(g) = &model.grad_fn {
        let mut x = vec![0.0; z.len()];
        let mut buf = vec![0.0; model.q];
        for (k, &w) in rule.weights().iter().enumerate() {
            for ((xj, zj), ej) in x.iter_mut().zip(z).zip(rule.node(k)) {
                *xj = zj + ej;
            }
            g(theta, &x, &mut buf);
            for (o, b) in out.iter_mut().zip(&buf) {
                *o += w * b;
            }
        }
    } else if opts.finite_differences {
        out = finite_difference_hdot(model, noise, theta, z, rule)?;
    } else {
        return Err(Error::Config(format!(
            "model {} has no gradient and finite differences are disabled",
            model.name
        )));
    }
    if out.iter().all(|v| v.is_finite()) {
        Ok(out)
    } else {
        Err(calibration_error(theta, z))
    }
}

/// Central differences of `H` with step `1e-6 * max(1, |theta_k|)`.
pub fn finite_difference_hdot(
    model: &ModelFamily,
    noise: &NoiseSpec,
    theta: &[f64],
    z: &[f64],
    rule: &QuadratureRule,
) -> Result<Vec<f64>> {
    let mut out = vec![0.0; theta.len()];
    let mut t = theta.to_vec();
    for k in 0..theta.len() {
        let step = 1e-6 * theta[k].abs().max(1.0);
        t[k] = theta[k] + step;
        let up = calibrate_h(model, noise, &t, z, rule)?;
        t[k] = theta[k] - step;
        let down = calibrate_h(model, noise, &t, z, rule)?;
        t[k] = theta[k];
        out[k] = (up - down) / (2.0 * step);
    }
    Ok(out)
}

/// `tau^2(z) = Var(m_theta(z + eta))`, by quadrature; never negative.
pub fn calibrate_tau2(model: &ModelFamily, noise: &NoiseSpec, theta: &[f64], z: &[f64], rule: &QuadratureRule) -> Result<f64> {
    check_dims(model, noise, theta, z)?;
    let mut x = vec![0.0; z.len()];
    let mut values = Vec::with_capacity(rule.len());
    for k in 0..rule.len() {
        for ((xj, zj), ej) in x.iter_mut().zip(z).zip(rule.node(k)) {
            *xj = zj + ej;
        }
        let m = model.mean(theta, &x);
        if !m.is_finite() {
            return Err(calibration_error(theta, z));
        }
        values.push(m);
    }
    let mean: f64 = values.iter().zip(rule.weights()).map(|(m, w)| w * m).sum();
    let var: f64 = values.iter().zip(rule.weights()).map(|(m, w)| w * (m - mean) * (m - mean)).sum();
    Ok(var.max(0.0))
}

/// Plain Monte Carlo estimate of `E[m_theta(z + eta)]` and its standard error.
pub fn mc_oracle_h(
    model: &ModelFamily,
    noise: &NoiseSpec,
    theta: &[f64],
    z: &[f64],
    n_draws: usize,
    seed: u64,
) -> Result<(f64, f64)> {
    check_dims(model, noise, theta, z)?;
    if n_draws == 0 {
        return Err(Error::InvalidInput("n_draws must be at least 1".into()));
    }
    let mut stream = Stream::new(seed);
    let sds: Vec<f64> = (0..noise.dim()).map(|j| noise.std_dev(j)).collect();
    let mut x = vec![0.0; z.len()];
    // Welford accumulation
    let mut mean = 0.0;
    let mut m2 = 0.0;
    for k in 0..n_draws {
        for ((xj, zj), sd) in x.iter_mut().zip(z).zip(&sds) {
            *xj = zj + stream.normal(*sd);
        }
        let v = model.mean(theta, &x);
        if !v.is_finite() {
            return Err(calibration_error(theta, z));
        }
        let delta = v - mean;
        mean += delta / (k + 1) as f64;
        m2 += delta * (v - mean);
    }
    let se = if n_draws > 1 { (m2 / (n_draws - 1) as f64 / n_draws as f64).sqrt() } else { f64::INFINITY };
    Ok((mean, se))
}

/// Bundles a family, its noise law and a matched Hermite rule.
#[derive(Debug, Clone)]
pub struct Calibrator {
    pub model: ModelFamily,
    pub noise: NoiseSpec,
    pub rule: QuadratureRule,
    pub options: CalibrationOptions,
}

/// `H_theta` (and optionally `H_dot_theta`) at a fixed list of points, for one `theta`.
#[derive(Debug, Clone)]
pub struct CalibratedValues {
    pub theta: Vec<f64>,
    pub h: Vec<f64>,
    /// Row-major `points x q`.
    pub hdot: Option<Vec<f64>>,
}

impl CalibratedValues {
    pub fn hdot_row(&self, i: usize) -> &[f64] {
        let q = self.theta.len();
        &self.hdot.as_ref().expect("H_dot requested")[i * q..(i + 1) * q]
    }
}

impl Calibrator {
    pub fn new(model: ModelFamily, noise: NoiseSpec, options: CalibrationOptions) -> Result<Self> {
        if noise.dim() != model.design_dim() {
            return Err(Error::Config(format!(
                "noise dimension {} does not match model {} design dimension {}",
                noise.dim(),
                model.name(),
                model.design_dim()
            )));
        }
        let rule = noise.hermite_rule(options.hermite_nodes);
        Ok(Self { model, noise, rule, options })
    }

    pub fn h(&self, theta: &[f64], z: &[f64]) -> Result<f64> {
        calibrate_h(&self.model, &self.noise, theta, z, &self.rule)
    }

    pub fn hdot(&self, theta: &[f64], z: &[f64]) -> Result<Vec<f64>> {
        calibrate_hdot(&self.model, &self.noise, theta, z, &self.rule, &self.options)
    }

    pub fn tau2(&self, theta: &[f64], z: &[f64]) -> Result<f64> {
        calibrate_tau2(&self.model, &self.noise, theta, z, &self.rule)
    }

    /// Evaluates the calibration once per point for this `theta`; `points`
    /// is row-major with `d` columns.
    pub fn at_points(&self, theta: &[f64], points: &[f64], with_hdot: bool) -> Result<CalibratedValues> {
        let d = self.model.design_dim();
        let q = self.model.param_dim();
        let count = points.len() / d;
        let mut h = Vec::with_capacity(count);
        let mut hdot = if with_hdot { Some(Vec::with_capacity(count * q)) } else { None };
        for i in 0..count {
            let z = &points[i * d..(i + 1) * d];
            h.push(self.h(theta, z)?);
            if let Some(buf) = hdot.as_mut() {
                buf.extend(self.hdot(theta, z)?);
            }
        }
        Ok(CalibratedValues { theta: theta.to_vec(), h, hdot })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn case1_noise() -> NoiseSpec {
        NoiseSpec::isotropic(1, 0.01).unwrap()
    }

    fn case2_noise() -> NoiseSpec {
        NoiseSpec::isotropic(2, 0.01).unwrap()
    }

    fn square_model() -> ModelFamily {
        ModelFamily::new("square", 1, 1, Arc::new(|_t: &[f64], x: &[f64]| x[0] * x[0]))
    }

    #[test]
    fn linear_h_is_theta_z() {
        let noise = case1_noise();
        let rule = noise.hermite_rule(30);
        let m = ModelFamily::linear_1d();
        assert!((calibrate_h(&m, &noise, &[1.0], &[0.4], &rule).unwrap() - 0.4).abs() < 1e-15);
        let q = m.clone().without_calibration();
        assert!((calibrate_h(&q, &noise, &[1.0], &[0.4], &rule).unwrap() - 0.4).abs() < 1e-14);
    }

    #[test]
    fn case2_h_closed_form_at_origin() {
        let noise = case2_noise();
        let rule = noise.hermite_rule(30);
        let m = ModelFamily::case2_2d();
        let expected = 0.02f64.exp();
        let a = calibrate_h(&m, &noise, &[1.0, 2.0], &[0.0, 0.0], &rule).unwrap();
        let b = calibrate_h(&m.without_calibration(), &noise, &[1.0, 2.0], &[0.0, 0.0], &rule).unwrap();
        assert!((a - expected).abs() < 1e-14);
        assert!((b - expected).abs() < 1e-12);
    }

    #[test]
    fn square_h_and_tau2() {
        let noise = NoiseSpec::isotropic(1, 0.05).unwrap();
        let rule = noise.hermite_rule(30);
        let m = square_model();
        assert!((calibrate_h(&m, &noise, &[0.0], &[1.0], &rule).unwrap() - 1.05).abs() < 1e-13);
        // Var(eta^2) = 2 sigma^4
        assert!((calibrate_tau2(&m, &noise, &[0.0], &[0.0], &rule).unwrap() - 0.005).abs() < 1e-14);
        let (mc, se) = mc_oracle_h(&m, &noise, &[0.0], &[1.0], 200_000, 3).unwrap();
        assert!((mc - 1.05).abs() < 4.0 * se);
    }

    #[test]
    fn tau2_linear_and_constant() {
        let noise = case1_noise();
        let rule = noise.hermite_rule(30);
        for z in [-0.9, 0.0, 0.3] {
            let t = calibrate_tau2(&ModelFamily::linear_1d(), &noise, &[1.0], &[z], &rule).unwrap();
            assert!((t - 0.01).abs() < 1e-14);
            assert!(calibrate_tau2(&ModelFamily::constant(1), &noise, &[2.5], &[z], &rule).unwrap() < 1e-24);
        }
    }

    #[test]
    fn case2_hdot_matches_closed_form_and_differences() {
        let noise = case2_noise();
        let rule = noise.hermite_rule(30);
        let opts = CalibrationOptions::default();
        let m = ModelFamily::case2_2d();
        let th = [1.0, 2.0];
        let z = [0.5, 0.5];
        let expected = [0.5, (0.5 + 2.0 * 0.01) * (2.0f64 * 0.5 + 0.005 * 4.0).exp()];
        let analytic = calibrate_hdot(&m, &noise, &th, &z, &rule, &opts).unwrap();
        let via_grad = calibrate_hdot(&m.clone().without_calibration(), &noise, &th, &z, &rule, &opts).unwrap();
        let fd = finite_difference_hdot(&m, &noise, &th, &z, &rule).unwrap();
        for k in 0..2 {
            assert!((analytic[k] - expected[k]).abs() < 1e-13);
            assert!((via_grad[k] - expected[k]).abs() < 1e-11 * expected[k].abs());
            assert!((fd[k] - expected[k]).abs() < 1e-7 * expected[k].abs().max(1.0));
        }
    }

    #[test]
    fn hdot_requires_gradient_or_differences() {
        let noise = case1_noise();
        let rule = noise.hermite_rule(10);
        let opts = CalibrationOptions { finite_differences: false, ..Default::default() };
        let err = calibrate_hdot(&square_model(), &noise, &[0.0], &[0.1], &rule, &opts).unwrap_err();
        assert!(matches!(err, Error::Config(_)));
        let with_fd = calibrate_hdot(&square_model(), &noise, &[0.0], &[0.1], &rule, &CalibrationOptions::default()).unwrap();
        assert_eq!(with_fd, vec![0.0]);
    }

    #[test]
    fn non_finite_model_is_reported() {
        let noise = case1_noise();
        let rule = noise.hermite_rule(10);
        let bad = ModelFamily::new("log", 1, 1, Arc::new(|_t: &[f64], x: &[f64]| x[0].ln()));
        let err = calibrate_h(&bad, &noise, &[0.0], &[0.0], &rule).unwrap_err();
        match err {
            Error::Calibration { z, .. } => assert_eq!(z, vec![0.0]),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn mc_oracle_is_deterministic_and_centered() {
        let noise = case1_noise();
        let m = ModelFamily::linear_1d();
        let a = mc_oracle_h(&m, &noise, &[1.0], &[0.0], 100_000, 11).unwrap();
        let b = mc_oracle_h(&m, &noise, &[1.0], &[0.0], 100_000, 11).unwrap();
        assert_eq!(a.0.to_bits(), b.0.to_bits());
        assert!(a.0.abs() < 4.0 * a.1);
        let c2 = mc_oracle_h(&ModelFamily::case2_2d(), &case2_noise(), &[1.0, 2.0], &[0.0, 0.0], 100_000, 5).unwrap();
        assert!((c2.0 - 0.02f64.exp()).abs() < 4.0 * c2.1);
    }

    #[test]
    fn poly_moments_match_quadrature() {
        let noise = NoiseSpec::isotropic(1, 0.04).unwrap();
        let rule = noise.hermite_rule(30);
        let m = ModelFamily::poly_1d(5).unwrap();
        let th = [0.3, -1.0, 0.5, 2.0, -0.7];
        for z in [-1.2, 0.0, 0.8] {
            let a = calibrate_h(&m, &noise, &th, &[z], &rule).unwrap();
            let b = quadrature_h(&m, &th, &[z], &rule).unwrap();
            assert!((a - b).abs() < 1e-12 * a.abs().max(1.0));
        }
    }

    #[test]
    fn gaussian_density_integrates_to_one() {
        let noise = NoiseSpec::isotropic(1, 0.01).unwrap();
        let rule = QuadratureRule::composite_midpoint(&[(-2.0, 2.0)], &[4000]).unwrap();
        assert!((rule.integrate(|x| noise.density(x)) - 1.0).abs() < 1e-10);
    }

    #[test]
    fn registry_lookup() {
        let reg = FamilyRegistry::default();
        assert_eq!(reg.build("linear-1d", None).unwrap().param_dim(), 1);
        assert_eq!(reg.build("poly-1d", Some(3)).unwrap().param_dim(), 3);
        assert!(reg.build("poly-1d", None).is_err());
        assert!(reg.build("nope", None).is_err());
    }
}
