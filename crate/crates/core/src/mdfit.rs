//! Minimum-distance fitting.
//!
//! The objective is
//! `M_n(theta) = int U_n(z, theta)^2 dpsi_hat(z)`, `dpsi_hat = dG / f_Zw^2`,
//! evaluated on the plan's grid. It is a weighted least-squares problem in the
//! node residuals `U_n(z_k, theta)`, whose Jacobian is `-mu_dot_n(z_k, theta)`,
//! so the general minimizer is Gauss-Newton with Armijo backtracking and a
//! box projection after each step.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{CalibratedValues, CalibrationOptions, Calibrator, ModelFamily, NoiseSpec};
use crate::numeric::pairwise_sum;
use crate::smooth::{Dataset, SmoothedDesign, SmoothingPlan};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FitOptions {
    pub max_iter: usize,
    /// Stop when the gradient norm (or the step length) falls below this.
    pub tol: f64,
    pub backtrack_factor: f64,
    pub armijo_slope: f64,
    /// Compute the plug-in asymptotic covariance after fitting.
    pub covariance: bool,
    /// Known error variance for the covariance plug-in; estimated when `None`.
    pub sigma_eps2: Option<f64>,
    pub calibration: CalibrationOptions,
}

impl Default for FitOptions {
    fn default() -> Self {
        Self {
            max_iter: 100,
            tol: 1e-8,
            backtrack_factor: 0.5,
            armijo_slope: 1e-4,
            covariance: true,
            sigma_eps2: None,
            calibration: CalibrationOptions::default(),
        }
    }
}

/// Plug-in pieces of the asymptotic covariance of `sqrt(n)(theta_hat - theta_0)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Covariance {
    pub sigma0: DMatrix<f64>,
    pub sigma: DMatrix<f64>,
    pub asym_cov: DMatrix<f64>,
    pub sigma_eps2: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitResult {
    pub theta_hat: Vec<f64>,
    pub objective: f64,
    pub iterations: usize,
    pub converged: bool,
    pub grad_norm: f64,
    pub covariance: Option<Covariance>,
    pub floored_nodes: usize,
    /// Objective at the start and after every accepted step.
    pub trace: Vec<f64>,
}

impl FitResult {
    pub fn sigma0_hat(&self) -> Option<&DMatrix<f64>> {
        self.covariance.as_ref().map(|c| &c.sigma0)
    }

    pub fn sigma_hat(&self) -> Option<&DMatrix<f64>> {
        self.covariance.as_ref().map(|c| &c.sigma)
    }

    pub fn asym_cov(&self) -> Option<&DMatrix<f64>> {
        self.covariance.as_ref().map(|c| &c.asym_cov)
    }
}

/// One dataset, one calibrated family, one plan: the minimum-distance problem
/// with its kernel design precomputed.
pub struct MdProblem<'a> {
    data: &'a Dataset,
    calib: &'a Calibrator,
    plan: &'a SmoothingPlan,
    design: SmoothedDesign,
}

/// Objective, gradient and Gauss-Newton normal equations at one `theta`.
struct GnSystem {
    objective: f64,
    gradient: DVector<f64>,
    normal: DMatrix<f64>,
    rhs: DVector<f64>,
}

impl<'a> MdProblem<'a> {
    pub fn new(data: &'a Dataset, calib: &'a Calibrator, plan: &'a SmoothingPlan) -> Result<Self> {
        if data.d() != calib.model.design_dim() {
            return Err(Error::InvalidInput(format!(
                "dataset has d={} but model {} expects d={}",
                data.d(),
                calib.model.name(),
                calib.model.design_dim()
            )));
        }
        let design = SmoothedDesign::new(data, plan)?;
        Ok(Self { data, calib, plan, design })
    }

    pub fn design(&self) -> &SmoothedDesign {
        &self.design
    }

    pub fn data(&self) -> &Dataset {
        self.data
    }

    pub fn calibrator(&self) -> &Calibrator {
        self.calib
    }

    pub fn plan(&self) -> &SmoothingPlan {
        self.plan
    }

    /// `H_theta(Z_i)` (and `H_dot`) for all observations, computed once per `theta`.
    pub fn calibrate(&self, theta: &[f64], with_hdot: bool) -> Result<CalibratedValues> {
        self.calib.at_points(theta, self.data.z_flat(), with_hdot)
    }

    /// `U_n(z_k, theta)` at every node.
    fn residual_field(&self, cal: &CalibratedValues) -> Vec<f64> {
        let resid: Vec<f64> = self.data.y().iter().zip(&cal.h).map(|(y, h)| y - h).collect();
        self.design.node_sums(&resid)
    }

    pub fn objective(&self, theta: &[f64]) -> Result<f64> {
        let cal = self.calibrate(theta, false)?;
        Ok(self.design.integrate_sq(&self.residual_field(&cal)))
    }

    /// `-2 int U_n mu_dot_n dpsi_hat`.
    pub fn gradient(&self, theta: &[f64]) -> Result<Vec<f64>> {
        Ok(self.system(theta)?.gradient.iter().copied().collect())
    }

    fn system(&self, theta: &[f64]) -> Result<GnSystem> {
        let q = theta.len();
        let cal = self.calibrate(theta, true)?;
        let u = self.residual_field(&cal);
        let mu_dot = self.design.node_sums_vec(cal.hdot.as_ref().expect("requested"), q);
        let psi = self.design.psi();
        let objective = self.design.integrate_sq(&u);

        let mut rhs = DVector::zeros(q);
        let mut normal = DMatrix::zeros(q, q);
        let mut terms = vec![0.0; psi.len()];
        for a in 0..q {
            for (k, t) in terms.iter_mut().enumerate() {
                *t = psi[k] * u[k] * mu_dot[k * q + a];
            }
            rhs[a] = pairwise_sum(&terms);
            for b in 0..=a {
                for (k, t) in terms.iter_mut().enumerate() {
                    *t = psi[k] * mu_dot[k * q + a] * mu_dot[k * q + b];
                }
                let v = pairwise_sum(&terms);
                normal[(a, b)] = v;
                normal[(b, a)] = v;
            }
        }
        let gradient = &rhs * -2.0;
        Ok(GnSystem { objective, gradient, normal, rhs })
    }
}

/// Relative tolerance on `M_n` in the Armijo test.
const ROUNDING_SLACK: f64 = 1e-13;

fn solve_normal(normal: &DMatrix<f64>, rhs: &DVector<f64>) -> Result<DVector<f64>> {
    let eig = SymmetricEigen::new(normal.clone());
    let max = eig.eigenvalues.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let min = eig.eigenvalues.iter().cloned().fold(f64::INFINITY, f64::min);
    let condition = if min > 0.0 { max / min } else { f64::INFINITY };
    if !(max > 0.0) || !(condition < 1e12) {
        return Err(Error::SingularNormal { condition });
    }
    normal.clone().cholesky().map(|c| c.solve(rhs)).ok_or(Error::SingularNormal { condition })
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Ordinary least squares of `Y` on the calibrated regressors `H_dot(Z_i)`,
/// used as a start for families linear in `theta`.
pub fn least_squares_start(problem: &MdProblem<'_>) -> Result<Vec<f64>> {
    let model = &problem.calib.model;
    let q = model.param_dim();
    let zero = vec![0.0; q];
    let cal = problem.calibrate(&zero, true)?;
    let mut xtx = DMatrix::zeros(q, q);
    let mut xty = DVector::zeros(q);
    for i in 0..problem.data.n() {
        let row = cal.hdot_row(i);
        for a in 0..q {
            xty[a] += row[a] * problem.data.y()[i];
            for b in 0..q {
                xtx[(a, b)] += row[a] * row[b];
            }
        }
    }
    let sol = xtx.cholesky().map(|c| c.solve(&xty)).ok_or_else(|| {
        Error::SingularFit("calibrated regressors are collinear; cannot form a least-squares start".into())
    })?;
    let mut theta: Vec<f64> = sol.iter().copied().collect();
    model.region().clamp(&mut theta);
    Ok(theta)
}

/// Gauss-Newton minimization of `M_n` over the family's parameter box.
pub fn minimize(problem: &MdProblem<'_>, theta_init: Option<&[f64]>, opts: &FitOptions) -> Result<FitResult> {
    let model = &problem.calib.model;
    let q = model.param_dim();
    let mut theta = match theta_init {
        Some(t) => {
            if t.len() != q {
                return Err(Error::InvalidInput(format!("theta_init has length {}, model needs {q}", t.len())));
            }
            t.to_vec()
        }
        None if model.is_linear_in_params() => least_squares_start(problem)?,
        None => {
            return Err(Error::Config(format!("model {} needs an explicit theta_init", model.name())));
        }
    };
    model.region().clamp(&mut theta);

    let mut trace = Vec::new();
    let mut iterations = 0;
    let mut sys = problem.system(&theta)?;
    trace.push(sys.objective);
    while iterations < opts.max_iter {
        let grad_norm = sys.gradient.norm();
        if grad_norm < opts.tol {
            break;
        }
        let step = solve_normal(&sys.normal, &sys.rhs)?;
        let slope = sys.gradient.dot(&step);
        // Near the minimum the predicted decrease drops below the rounding
        // noise of M_n; the Gauss-Newton direction is still accurate there.
        let slack = ROUNDING_SLACK * sys.objective.abs();
        let mut t = 1.0;
        let mut accepted = None;
        while t > 1e-10 {
            let mut cand: Vec<f64> = theta.iter().zip(step.iter()).map(|(a, s)| a + t * s).collect();
            model.region().clamp(&mut cand);
            let f = problem.objective(&cand)?;
            if f <= sys.objective + opts.armijo_slope * t * slope + slack {
                accepted = Some((cand, f));
                break;
            }
            t *= opts.backtrack_factor;
        }
        iterations += 1;
        let Some((cand, _)) = accepted else {
            // No decrease possible along the Gauss-Newton direction.
            break;
        };
        let moved: Vec<f64> = cand.iter().zip(&theta).map(|(a, b)| a - b).collect();
        let step_len = norm(&moved);
        let done = step_len <= f64::EPSILON * (1.0 + norm(&theta));
        theta = cand;
        sys = problem.system(&theta)?;
        trace.push(sys.objective);
        if done {
            break;
        }
    }
    let grad_norm = sys.gradient.norm();
    let converged = grad_norm < opts.tol;
    let covariance = if opts.covariance {
        Some(plugin_covariance_for(problem, &theta, opts.sigma_eps2, FzSource::Estimated)?)
    } else {
        None
    };
    Ok(FitResult {
        theta_hat: theta,
        objective: sys.objective,
        iterations,
        converged,
        grad_norm,
        covariance,
        floored_nodes: problem.design.floored_nodes(),
        trace,
    })
}

fn default_calibrator(model: &ModelFamily, noise: &NoiseSpec, opts: CalibrationOptions) -> Result<Calibrator> {
    Calibrator::new(model.clone(), noise.clone(), opts)
}

/// `M_n(theta)`.
pub fn objective_mn(data: &Dataset, model: &ModelFamily, noise: &NoiseSpec, plan: &SmoothingPlan, theta: &[f64]) -> Result<f64> {
    let calib = default_calibrator(model, noise, CalibrationOptions::default())?;
    MdProblem::new(data, &calib, plan)?.objective(theta)
}

/// `M_n'(theta) = -2 int U_n(z, theta) mu_dot_n(z, theta) dpsi_hat(z)`.
pub fn gradient_mn(data: &Dataset, model: &ModelFamily, noise: &NoiseSpec, plan: &SmoothingPlan, theta: &[f64]) -> Result<Vec<f64>> {
    let calib = default_calibrator(model, noise, CalibrationOptions::default())?;
    MdProblem::new(data, &calib, plan)?.gradient(theta)
}

/// Closed-form minimizer `A_n / B_n` for `m_theta(x) = theta x` in one dimension.
pub fn fit_linear_closed_form(data: &Dataset, plan: &SmoothingPlan) -> Result<FitResult> {
    if data.d() != 1 {
        return Err(Error::InvalidInput("closed-form linear fit needs one-dimensional data".into()));
    }
    let design = SmoothedDesign::new(data, plan)?;
    let sy = design.node_sums(data.y());
    let sz = design.node_sums(data.z_flat());
    let psi = design.psi();
    let a_terms: Vec<f64> = (0..psi.len()).map(|k| psi[k] * sy[k] * sz[k]).collect();
    let b_terms: Vec<f64> = (0..psi.len()).map(|k| psi[k] * sz[k] * sz[k]).collect();
    let a = pairwise_sum(&a_terms);
    let b = pairwise_sum(&b_terms);
    if !(b > 0.0) {
        return Err(Error::SingularFit(format!("B_n = {b:e} is not positive (degenerate design)")));
    }
    let theta = a / b;
    let u: Vec<f64> = sy.iter().zip(&sz).map(|(y, z)| y - theta * z).collect();
    let objective = design.integrate_sq(&u);
    let g_terms: Vec<f64> = (0..psi.len()).map(|k| psi[k] * u[k] * sz[k]).collect();
    let grad = -2.0 * pairwise_sum(&g_terms);
    Ok(FitResult {
        theta_hat: vec![theta],
        objective,
        iterations: 0,
        converged: true,
        grad_norm: grad.abs(),
        covariance: None,
        floored_nodes: design.floored_nodes(),
        trace: vec![objective],
    })
}

/// Fits `theta_hat = argmin M_n(theta)` by Gauss-Newton.
pub fn fit_general(
    data: &Dataset,
    model: &ModelFamily,
    noise: &NoiseSpec,
    plan: &SmoothingPlan,
    theta_init: Option<&[f64]>,
    opts: &FitOptions,
) -> Result<FitResult> {
    let calib = default_calibrator(model, noise, opts.calibration)?;
    let problem = MdProblem::new(data, &calib, plan)?;
    minimize(&problem, theta_init, opts)
}

/// Source of the design density `f_Z` in the plug-in `Sigma`.
#[derive(Clone, Copy)]
pub enum FzSource<'f> {
    /// The floored kernel estimate `f_Zw` on the grid.
    Estimated,
    Known(&'f dyn Fn(&[f64]) -> f64),
}

/// `Sigma_0 = int H_dot H_dot' dG`,
/// `Sigma = int (sigma_eps^2 + tau^2) H_dot H_dot' g^2 / f_Z du`, and
/// `Sigma_0^{-1} Sigma Sigma_0^{-1}`, all at `theta_hat`.
pub fn plugin_covariance(
    data: &Dataset,
    model: &ModelFamily,
    noise: &NoiseSpec,
    plan: &SmoothingPlan,
    theta_hat: &[f64],
    sigma_eps2: Option<f64>,
    fz: FzSource<'_>,
) -> Result<Covariance> {
    let calib = default_calibrator(model, noise, CalibrationOptions::default())?;
    let problem = MdProblem::new(data, &calib, plan)?;
    plugin_covariance_for(&problem, theta_hat, sigma_eps2, fz)
}

pub fn plugin_covariance_for(problem: &MdProblem<'_>, theta_hat: &[f64], sigma_eps2: Option<f64>, fz: FzSource<'_>) -> Result<Covariance> {
    let calib = problem.calib;
    let grid = &problem.plan.grid;
    let q = theta_hat.len();

    let sigma_eps2 = match sigma_eps2 {
        Some(s) => s,
        None => {
            let cal = problem.calibrate(theta_hat, false)?;
            let n = problem.data.n();
            let zeta_sq: Vec<f64> = problem.data.y().iter().zip(&cal.h).map(|(y, h)| (y - h) * (y - h)).collect();
            let tau: Vec<f64> = (0..n).map(|i| calib.tau2(theta_hat, problem.data.z(i))).collect::<Result<_>>()?;
            (pairwise_sum(&zeta_sq) / n as f64 - pairwise_sum(&tau) / n as f64).max(0.0)
        }
    };

    let at_grid = calib.at_points(theta_hat, grid.nodes_flat(), true)?;
    let mut sigma0 = DMatrix::zeros(q, q);
    let mut sigma = DMatrix::zeros(q, q);
    let mut s0_terms = vec![vec![0.0; grid.len()]; q * q];
    let mut s_terms = vec![vec![0.0; grid.len()]; q * q];
    for k in 0..grid.len() {
        let z = grid.node(k);
        let hd = at_grid.hdot_row(k);
        let tau2 = calib.tau2(theta_hat, z)?;
        let f = match fz {
            FzSource::Estimated => problem.design.fhat()[k],
            FzSource::Known(f) => f(z),
        };
        let w = grid.weights()[k];
        let scale = (sigma_eps2 + tau2) * grid.density()[k] / f;
        for a in 0..q {
            for b in 0..q {
                s0_terms[a * q + b][k] = w * hd[a] * hd[b];
                s_terms[a * q + b][k] = w * scale * hd[a] * hd[b];
            }
        }
    }
    for a in 0..q {
        for b in 0..q {
            sigma0[(a, b)] = pairwise_sum(&s0_terms[a * q + b]);
            sigma[(a, b)] = pairwise_sum(&s_terms[a * q + b]);
        }
    }
    let eig = SymmetricEigen::new(sigma0.clone());
    let max = eig.eigenvalues.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let min = eig.eigenvalues.iter().cloned().fold(f64::INFINITY, f64::min);
    if !(min > 1e-12 * max.abs().max(f64::MIN_POSITIVE)) {
        return Err(Error::NotIdentifiable);
    }
    let inv = sigma0.clone().try_inverse().ok_or(Error::NotIdentifiable)?;
    let asym = &inv * &sigma * &inv;
    let asym_cov = (&asym + asym.transpose()) * 0.5;
    Ok(Covariance { sigma0, sigma, asym_cov, sigma_eps2 })
}
