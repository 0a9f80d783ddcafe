//! Data-generating processes for the two simulation settings.

use std::fmt;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{ModelFamily, NoiseSpec, DEFAULT_HERMITE_NODES};
use crate::rng::Stream;
use crate::smooth::{Dataset, GridMeasure};

/// Regression function `x -> mu(x)` used only to generate data.
pub type RegressionFn = Arc<dyn Fn(&[f64]) -> f64 + Send + Sync>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Case {
    /// `d = 1`, `m_theta(x) = theta x`, `theta_0 = 1`.
    One,
    /// `d = 2`, `m_theta(x) = theta_1 x_1 + exp(theta_2 x_2)`, `theta_0 = (1, 2)`.
    Two,
}

impl Case {
    pub fn from_number(k: u32) -> Result<Self> {
        match k {
            1 => Ok(Case::One),
            2 => Ok(Case::Two),
            _ => Err(Error::Config(format!("case must be 1 or 2, got {k}"))),
        }
    }

    pub fn number(self) -> u32 {
        match self {
            Case::One => 1,
            Case::Two => 2,
        }
    }

    pub fn dim(self) -> usize {
        self.number() as usize
    }

    /// The null family fitted in this setting.
    pub fn family(self) -> ModelFamily {
        match self {
            Case::One => ModelFamily::linear_1d(),
            Case::Two => ModelFamily::case2_2d(),
        }
    }

    pub fn true_theta(self) -> Vec<f64> {
        match self {
            Case::One => vec![1.0],
            Case::Two => vec![1.0, 2.0],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ModelId {
    /// Model 0: the null.
    Null,
    /// Models 1-3: fixed alternatives.
    Alt(u8),
    /// `m_theta0 + gamma_n r` with `gamma_n = 1 / sqrt(n h^{d/2})`.
    LocalAlt,
}

impl ModelId {
    pub fn parse(s: &str) -> Result<Self> {
        match s.trim() {
            "0" => Ok(ModelId::Null),
            "1" => Ok(ModelId::Alt(1)),
            "2" => Ok(ModelId::Alt(2)),
            "3" => Ok(ModelId::Alt(3)),
            "local-alt" => Ok(ModelId::LocalAlt),
            other => Err(Error::Config(format!("model_id must be 0, 1, 2, 3 or \"local-alt\", got \"{other}\""))),
        }
    }

    /// Model 3 has a jump in the regression function, outside the smoothness assumptions.
    pub fn outside_theory(self) -> bool {
        self == ModelId::Alt(3)
    }
}

impl fmt::Display for ModelId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ModelId::Null => write!(f, "0"),
            ModelId::Alt(k) => write!(f, "{k}"),
            ModelId::LocalAlt => write!(f, "local-alt"),
        }
    }
}

/// A named perturbation `r` for local alternatives.
#[derive(Clone)]
pub struct Perturbation {
    pub name: String,
    pub r: RegressionFn,
}

impl Perturbation {
    pub fn new(name: impl Into<String>, r: RegressionFn) -> Self {
        Self { name: name.into(), r }
    }

    /// `r(x) = x^2 - 1/3`, orthogonal to `theta z` under Lebesgue measure on `[-1,1]`.
    pub fn centered_square() -> Self {
        Self::new("x^2 - 1/3", Arc::new(|x: &[f64]| x[0] * x[0] - 1.0 / 3.0))
    }

    pub fn scaled(&self, c: f64) -> Self {
        let r = self.r.clone();
        Self::new(format!("{c} * ({})", self.name), Arc::new(move |x: &[f64]| c * r(x)))
    }
}

impl fmt::Debug for Perturbation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Perturbation").field("name", &self.name).finish()
    }
}

#[derive(Debug, Clone)]
pub struct DgpSpec {
    pub case: Case,
    pub model: ModelId,
    pub n: usize,
    pub seed: u64,
    pub true_theta: Vec<f64>,
    pub sigma_eps: f64,
    pub sigma_eta: f64,
    pub perturbation: Option<Perturbation>,
    /// Bandwidth `h` that sets `gamma_n` for local alternatives.
    pub local_h: Option<f64>,
}

impl DgpSpec {
    pub fn new(case: Case, model: ModelId, n: usize, seed: u64) -> Self {
        let perturbation = (model == ModelId::LocalAlt && case == Case::One).then(Perturbation::centered_square);
        Self {
            case,
            model,
            n,
            seed,
            true_theta: case.true_theta(),
            sigma_eps: 0.1,
            sigma_eta: 0.1,
            perturbation,
            local_h: None,
        }
    }

    pub fn noise(&self) -> Result<NoiseSpec> {
        NoiseSpec::isotropic(self.case.dim(), self.sigma_eta * self.sigma_eta)
    }

    /// `gamma_n = 1 / sqrt(n h^{d/2})`.
    pub fn local_gamma(&self) -> Result<f64> {
        let h = self
            .local_h
            .ok_or_else(|| Error::Config("local alternative needs the bandwidth h to set gamma_n".into()))?;
        Ok(1.0 / (self.n as f64 * h.powf(self.case.dim() as f64 / 2.0)).sqrt())
    }

    pub fn validate(&self) -> Result<()> {
        if self.n < 10 {
            return Err(Error::Config(format!("n must be at least 10, got {}", self.n)));
        }
        if let ModelId::Alt(k) = self.model {
            if !(1..=3).contains(&k) {
                return Err(Error::Config(format!("model_id must be 0-3 or local-alt, got {k}")));
            }
        }
        if self.true_theta.len() != self.case.family().param_dim() {
            return Err(Error::Config(format!(
                "true_theta has length {}, case {} needs {}",
                self.true_theta.len(),
                self.case.number(),
                self.case.family().param_dim()
            )));
        }
        if !(self.sigma_eps >= 0.0 && self.sigma_eta >= 0.0) {
            return Err(Error::Config("noise scales must be non-negative".into()));
        }
        if self.model == ModelId::LocalAlt {
            let pert = self
                .perturbation
                .as_ref()
                .ok_or_else(|| Error::Config("local alternative needs a perturbation r".into()))?;
            self.local_gamma()?;
            let grid = GridMeasure::default_for(self.case.dim())?;
            let worst = orthogonality_defect(&self.case.family(), &self.noise()?, &self.true_theta, pert, &grid)?;
            if worst > 1e-8 {
                return Err(Error::Config(format!(
                    "perturbation '{}' is not orthogonal to the null family: |int H_theta R dG| = {worst:.3e}",
                    pert.name
                )));
            }
        }
        Ok(())
    }

    /// The regression function `mu` that generates `Y`.
    pub fn regression(&self) -> Result<RegressionFn> {
        let t = self.true_theta.clone();
        let f: RegressionFn = match (self.case, self.model) {
            (Case::One, ModelId::Null) => Arc::new(move |x: &[f64]| t[0] * x[0]),
            (Case::One, ModelId::Alt(1)) => Arc::new(move |x: &[f64]| t[0] * x[0] + 0.3 * x[0] * x[0]),
            (Case::One, ModelId::Alt(2)) => Arc::new(move |x: &[f64]| t[0] * x[0] + 1.4 * (-0.2 * x[0] * x[0]).exp()),
            (Case::One, ModelId::Alt(3)) => Arc::new(move |x: &[f64]| if x[0] >= 0.2 { t[0] * x[0] } else { 0.0 }),
            (Case::Two, ModelId::Null) => Arc::new(move |x: &[f64]| t[0] * x[0] + (t[1] * x[1]).exp()),
            (Case::Two, ModelId::Alt(1)) => {
                Arc::new(move |x: &[f64]| t[0] * x[0] + (t[1] * x[1]).exp() + 1.4 * x[0] * x[0] + 1.0)
            }
            (Case::Two, ModelId::Alt(2)) => {
                Arc::new(move |x: &[f64]| t[0] * x[0] + (t[1] * x[1]).exp() + 1.4 * x[0] * x[0] * x[1] * x[1])
            }
            (Case::Two, ModelId::Alt(3)) => Arc::new(move |x: &[f64]| {
                t[0] * x[0] + (t[1] * x[1]).exp() + 1.4 * ((-0.2 * x[0]).exp() + (0.7 * x[1] * x[1]).exp())
            }),
            (_, ModelId::LocalAlt) => {
                let family = self.case.family();
                let gamma = self.local_gamma()?;
                let r = self
                    .perturbation
                    .as_ref()
                    .ok_or_else(|| Error::Config("local alternative needs a perturbation r".into()))?
                    .r
                    .clone();
                Arc::new(move |x: &[f64]| family.mean(&t, x) + gamma * r(x))
            }
            (_, ModelId::Alt(k)) => return Err(Error::Config(format!("unknown model_id {k}"))),
        };
        Ok(f)
    }
}

/// `max |int H_theta R dG|` over a few parameter values, where `R(z) = E r(z + eta)`.
pub fn orthogonality_defect(
    family: &ModelFamily,
    noise: &NoiseSpec,
    theta0: &[f64],
    pert: &Perturbation,
    grid: &GridMeasure,
) -> Result<f64> {
    let calib = crate::model::Calibrator::new(family.clone(), noise.clone(), Default::default())?;
    let rule = noise.hermite_rule(DEFAULT_HERMITE_NODES);
    let big_r: Vec<f64> = (0..grid.len()).map(|k| smoothed_perturbation(pert, grid.node(k), &rule)).collect();
    let mut worst: f64 = 0.0;
    let probes = [theta0.to_vec(), theta0.iter().map(|t| 2.0 * t).collect(), theta0.iter().map(|t| t - 0.5).collect()];
    for theta in probes {
        let h = calib.at_points(&theta, grid.nodes_flat(), false)?.h;
        let v = grid.integrate_indexed(|k, _| h[k] * big_r[k]);
        worst = worst.max(v.abs());
    }
    Ok(worst)
}

/// `R(z) = E r(z + eta)` by the given Hermite rule.
pub fn smoothed_perturbation(pert: &Perturbation, z: &[f64], rule: &crate::model::quadrature::QuadratureRule) -> f64 {
    let mut x = vec![0.0; z.len()];
    rule.integrate(|e| {
        for j in 0..z.len() {
            x[j] = z[j] + e[j];
        }
        (pert.r)(&x)
    })
}

/// Draws `(Z_i, Y_i)`; the latent `X_i` is discarded.
pub fn sample(dgp: &DgpSpec) -> Result<Dataset> {
    dgp.validate()?;
    let mu = dgp.regression()?;
    let d = dgp.case.dim();
    let mut rng = Stream::new(dgp.seed);
    let mut z = Vec::with_capacity(dgp.n * d);
    let mut y = Vec::with_capacity(dgp.n);
    let mut x = vec![0.0; d];
    for _ in 0..dgp.n {
        for xj in x.iter_mut() {
            let zj = rng.uniform_in(-1.0, 1.0);
            z.push(zj);
            *xj = zj + rng.normal(dgp.sigma_eta);
        }
        y.push(mu(&x) + rng.normal(dgp.sigma_eps));
    }
    Dataset::new(z, y, d)
}
