//! The lack-of-fit test.
//!
//! With residuals `zeta_i = Y_i - H_theta_hat(Z_i)` and the pairwise integrals
//! `M_ij = int K_hi K_hj zeta_i zeta_j dpsi_hat`, the statistic is
//! `D_n = n h^{d/2} (M_n(theta_hat) - C_n) / sqrt(Gamma_n)` where
//! `C_n = (1/n^2) sum_i M_ii` and `Gamma_n = (2 h^d / n^2) sum_{i != j} M_ij^2`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mdfit::{minimize, FitOptions, FitResult, MdProblem};
use crate::model::{CalibrationOptions, Calibrator, ModelFamily, NoiseSpec};
use crate::numeric::{normal_quantile, pairwise_sum, two_sided_p};
use crate::smooth::{Dataset, SmoothedDesign, SmoothingPlan};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TestResult {
    pub theta_hat: Vec<f64>,
    pub mn_value: f64,
    pub c_hat: f64,
    pub gamma_hat: f64,
    pub d_hat: f64,
    pub p_value: f64,
    pub reject: bool,
    pub alpha: f64,
    pub floored_nodes: usize,
}

impl TestResult {
    /// Column names for a parameter dimension `q`, in field order.
    pub fn csv_header(q: usize) -> Vec<String> {
        let mut cols: Vec<String> = (1..=q).map(|j| format!("theta_hat_{j}")).collect();
        for name in ["mn_value", "c_hat", "gamma_hat", "d_hat", "p_value", "reject", "alpha", "floored_nodes"] {
            cols.push(name.to_string());
        }
        cols
    }

    /// Full-precision CSV fields; floats use the shortest round-trip form.
    pub fn csv_fields(&self) -> Vec<String> {
        let mut out: Vec<String> = self.theta_hat.iter().map(|t| t.to_string()).collect();
        for v in [self.mn_value, self.c_hat, self.gamma_hat, self.d_hat, self.p_value] {
            out.push(v.to_string());
        }
        out.push(self.reject.to_string());
        out.push(self.alpha.to_string());
        out.push(self.floored_nodes.to_string());
        out
    }

    pub fn from_csv_fields(fields: &[&str]) -> Result<Self> {
        if fields.len() < 9 {
            return Err(Error::InvalidInput(format!("test result row has {} fields, expected at least 9", fields.len())));
        }
        let q = fields.len() - 8;
        let num = |col: usize| -> Result<f64> {
            fields[col].trim().parse::<f64>().map_err(|_| {
                Error::InvalidInput(format!("test result column {}: '{}' is not a number", col + 1, fields[col]))
            })
        };
        let theta_hat = (0..q).map(num).collect::<Result<Vec<_>>>()?;
        let reject = fields[q + 5]
            .trim()
            .parse::<bool>()
            .map_err(|_| Error::InvalidInput(format!("test result column {}: '{}' is not a flag", q + 6, fields[q + 5])))?;
        let floored_nodes = fields[q + 7]
            .trim()
            .parse::<usize>()
            .map_err(|_| Error::InvalidInput(format!("test result column {}: '{}' is not a count", q + 8, fields[q + 7])))?;
        Ok(Self {
            theta_hat,
            mn_value: num(q)?,
            c_hat: num(q + 1)?,
            gamma_hat: num(q + 2)?,
            d_hat: num(q + 3)?,
            p_value: num(q + 4)?,
            reject,
            alpha: num(q + 6)?,
            floored_nodes,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TestOptions {
    pub alpha: f64,
    pub theta_init: Option<Vec<f64>>,
    pub fit: FitOptions,
}

impl Default for TestOptions {
    fn default() -> Self {
        Self { alpha: 0.05, theta_init: None, fit: FitOptions { covariance: false, ..FitOptions::default() } }
    }
}

/// `zeta_i = Y_i - H_theta(Z_i)`.
pub fn residuals(data: &Dataset, model: &ModelFamily, noise: &NoiseSpec, theta: &[f64]) -> Result<Vec<f64>> {
    if !model.region().contains(theta) {
        return Err(Error::InvalidInput(format!("theta {theta:?} lies outside the parameter box")));
    }
    let calib = Calibrator::new(model.clone(), noise.clone(), CalibrationOptions::default())?;
    residuals_with(&calib, data, theta)
}

fn residuals_with(calib: &Calibrator, data: &Dataset, theta: &[f64]) -> Result<Vec<f64>> {
    let h = calib.at_points(theta, data.z_flat(), false)?.h;
    Ok(data.y().iter().zip(h).map(|(y, h)| y - h).collect())
}

/// `C_n = (1/n^2) sum_k psi_k sum_i K_h(z_k - Z_i)^2 zeta_i^2`.
pub fn c_hat(design: &SmoothedDesign, zeta: &[f64]) -> f64 {
    let n = design.n() as f64;
    let psi = design.psi();
    let terms: Vec<f64> = (0..design.nodes())
        .map(|k| psi[k] * design.node_entries(k).map(|(i, kv)| kv * kv * zeta[i] * zeta[i]).sum::<f64>())
        .collect();
    pairwise_sum(&terms) / (n * n)
}

/// `Gamma_n = (2 h^d / n^2) (||M||_F^2 - sum_i M_ii^2)`, accumulated one row of
/// `M` at a time through the sparse kernel index.
pub fn gamma_hat(design: &SmoothedDesign, zeta: &[f64]) -> f64 {
    let n = design.n();
    let psi = design.psi();
    let mut row = vec![0.0; n];
    let mut touched: Vec<usize> = Vec::new();
    let mut row_sums = Vec::with_capacity(n);
    let mut sq = Vec::new();
    for i in 0..n {
        for (k, kik) in design.obs_entries(i) {
            let a = psi[k] * kik;
            for (j, kjk) in design.node_entries(k) {
                if j != i {
                    if row[j] == 0.0 {
                        touched.push(j);
                    }
                    row[j] += a * kjk;
                }
            }
        }
        sq.clear();
        for &j in &touched {
            let m = row[j] * zeta[i] * zeta[j];
            sq.push(m * m);
            row[j] = 0.0;
        }
        touched.clear();
        row_sums.push(pairwise_sum(&sq));
    }
    let nf = n as f64;
    2.0 * design.h().powi(design.d() as i32) * pairwise_sum(&row_sums) / (nf * nf)
}

/// Residuals below this fraction of `max |Y_i|` count as an exact fit.
pub const EXACT_FIT_TOL: f64 = 1e-12;

/// `D_n` and its pieces for a fitted `theta_hat`.
pub fn statistic(problem: &MdProblem<'_>, fit: &FitResult, alpha: f64) -> Result<TestResult> {
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::Config(format!("alpha must satisfy alpha ∈ (0,1), got {alpha}")));
    }
    let design = problem.design();
    if design.n() < 2 {
        return Err(Error::InvalidInput("the test needs at least two observations".into()));
    }
    let zeta = residuals_with(problem.calibrator(), problem.data(), &fit.theta_hat)?;
    let mn_value = fit.objective;
    let c = c_hat(design, &zeta);
    let gamma = gamma_hat(design, &zeta);
    let y_scale = problem.data().y().iter().fold(0.0f64, |m, v| m.max(v.abs()));
    if zeta.iter().all(|z| z.abs() <= EXACT_FIT_TOL * y_scale) {
        // residuals at rounding level: the model reproduces the data
        return Ok(TestResult {
            theta_hat: fit.theta_hat.clone(),
            mn_value,
            c_hat: c,
            gamma_hat: gamma,
            d_hat: 0.0,
            p_value: 1.0,
            reject: false,
            alpha,
            floored_nodes: design.floored_nodes(),
        });
    }
    if !(gamma > 0.0) {
        return Err(Error::DegenerateVariance { value: gamma });
    }
    let n = design.n() as f64;
    let d_hat = n * design.h().powf(design.d() as f64 / 2.0) * (mn_value - c) / gamma.sqrt();
    let p_value = two_sided_p(d_hat);
    let reject = d_hat.abs() > normal_quantile(1.0 - alpha / 2.0);
    Ok(TestResult {
        theta_hat: fit.theta_hat.clone(),
        mn_value,
        c_hat: c,
        gamma_hat: gamma,
        d_hat,
        p_value,
        reject,
        alpha,
        floored_nodes: design.floored_nodes(),
    })
}

/// Fits `theta_hat` and runs the test at level `alpha`.
pub fn run_test(data: &Dataset, model: &ModelFamily, noise: &NoiseSpec, plan: &SmoothingPlan, opts: &TestOptions) -> Result<TestResult> {
    let calib = Calibrator::new(model.clone(), noise.clone(), opts.fit.calibration)?;
    let problem = MdProblem::new(data, &calib, plan)?;
    let fit = minimize(&problem, opts.theta_init.as_deref(), &opts.fit)?;
    statistic(&problem, &fit, opts.alpha)
}
