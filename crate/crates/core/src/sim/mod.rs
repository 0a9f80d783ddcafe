//! Simulation: data-generating processes, the Monte Carlo runner and the
//! population quantities its output is compared against.

pub mod demo;
pub mod dgp;

use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lof::{statistic, TestResult};
use crate::mdfit::{minimize, FitOptions, FitResult, MdProblem};
use crate::model::{Calibrator, ModelFamily, NoiseSpec, DEFAULT_HERMITE_NODES};
use crate::numeric::{mean, median, normal_cdf, pairwise_sum, sample_variance};
use crate::smooth::{k2_norm_sq, PlanSpec, SmoothingPlan};

pub use demo::{naive_j_demo, DemoOptions, NaiveDemo};
pub use dgp::{orthogonality_defect, sample, smoothed_perturbation, Case, DgpSpec, ModelId, Perturbation};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    Fit,
    Test,
    Both,
}

impl Task {
    fn tests(self) -> bool {
        self != Task::Fit
    }
}

/// Settings for a batch of replications; the seed of replication `r` is `seed_base + r`.
#[derive(Debug, Clone)]
pub struct McConfig {
    pub reps: usize,
    pub task: Task,
    pub alpha: f64,
    pub plan: PlanSpec,
    /// Gauss-Newton start; families linear in `theta` default to least squares.
    pub theta_init: Option<Vec<f64>>,
    pub threads: usize,
    pub keep_rows: bool,
    pub fit: FitOptions,
}

impl McConfig {
    pub fn new(reps: usize, task: Task, plan: PlanSpec) -> Self {
        Self {
            reps,
            task,
            alpha: 0.05,
            plan,
            theta_init: None,
            threads: 1,
            keep_rows: false,
            fit: FitOptions { covariance: false, ..FitOptions::default() },
        }
    }
}

/// One replication's outcome.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RepRow {
    pub rep: usize,
    pub theta_hat: Vec<f64>,
    pub d_hat: Option<f64>,
    pub p_value: Option<f64>,
    pub reject: Option<bool>,
    pub gamma_hat: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct McReport {
    pub case: u32,
    pub model: String,
    pub n: usize,
    pub h: f64,
    pub w: f64,
    /// Successful replications.
    pub reps: usize,
    pub requested: usize,
    pub failures: usize,
    pub mean_theta: Vec<f64>,
    pub mse_theta: Vec<f64>,
    pub var_theta: Vec<f64>,
    pub rejection_rate: Option<f64>,
    pub ks_stat: Option<f64>,
    pub mean_d_hat: Option<f64>,
    pub var_d_hat: Option<f64>,
    pub median_abs_d_hat: Option<f64>,
    pub gamma_hat_mean: Option<f64>,
    pub outside_theory: bool,
    pub rows: Option<Vec<RepRow>>,
    #[serde(skip)]
    pub runtime_secs: f64,
}

impl McReport {
    pub fn d_values(&self) -> Option<Vec<f64>> {
        self.rows.as_ref().map(|rows| rows.iter().filter_map(|r| r.d_hat).collect())
    }
}

/// Fits (and optionally tests) one dataset.
pub fn run_single(
    data: &crate::smooth::Dataset,
    model: &ModelFamily,
    noise: &NoiseSpec,
    plan: &SmoothingPlan,
    theta_init: Option<&[f64]>,
    fit_opts: &FitOptions,
    alpha: Option<f64>,
) -> Result<(FitResult, Option<TestResult>)> {
    let calib = Calibrator::new(model.clone(), noise.clone(), fit_opts.calibration)?;
    let problem = MdProblem::new(data, &calib, plan)?;
    let fit = minimize(&problem, theta_init, fit_opts)?;
    if !fit.converged {
        return Err(Error::SingularFit(format!(
            "Gauss-Newton stopped after {} iterations with gradient norm {:.3e}",
            fit.iterations, fit.grad_norm
        )));
    }
    let test = match alpha {
        Some(a) => Some(statistic(&problem, &fit, a)?),
        None => None,
    };
    Ok((fit, test))
}

/// Runs `cfg.reps` independent replications of `template`.
pub fn run_mc(template: &DgpSpec, cfg: &McConfig) -> Result<McReport> {
    if cfg.reps == 0 {
        return Err(Error::Config("reps must be at least 1".into()));
    }
    let start = Instant::now();
    let plan = cfg.plan.resolve(template.n)?;
    let mut template = template.clone();
    if template.model == ModelId::LocalAlt && template.local_h.is_none() {
        template.local_h = Some(plan.h());
    }
    template.validate()?;
    let model = template.case.family();
    let noise = template.noise()?;
    let alpha = cfg.task.tests().then_some(cfg.alpha);

    let one = |rep: usize| -> Option<RepRow> {
        let mut dgp = template.clone();
        dgp.seed = template.seed.wrapping_add(rep as u64);
        let data = sample(&dgp).ok()?;
        match run_single(&data, &model, &noise, &plan, cfg.theta_init.as_deref(), &cfg.fit, alpha) {
            Ok((fit, test)) => Some(RepRow {
                rep,
                theta_hat: fit.theta_hat,
                d_hat: test.as_ref().map(|t| t.d_hat),
                p_value: test.as_ref().map(|t| t.p_value),
                reject: test.as_ref().map(|t| t.reject),
                gamma_hat: test.as_ref().map(|t| t.gamma_hat),
            }),
            Err(e) => {
                log::debug!("replication {rep} failed: {e}");
                None
            }
        }
    };
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.threads.max(1))
        .build()
        .map_err(|e| Error::Config(format!("cannot build thread pool: {e}")))?;
    let slots: Vec<Option<RepRow>> = pool.install(|| (0..cfg.reps).into_par_iter().map(one).collect());

    let rows: Vec<RepRow> = slots.into_iter().flatten().collect();
    let failures = cfg.reps - rows.len();
    if failures * 20 > cfg.reps {
        return Err(Error::TooManyFailures { failed: failures, total: cfg.reps });
    }
    if rows.is_empty() {
        return Err(Error::TooManyFailures { failed: failures, total: cfg.reps });
    }
    let q = template.true_theta.len();
    let mut mean_theta = Vec::with_capacity(q);
    let mut mse_theta = Vec::with_capacity(q);
    let mut var_theta = Vec::with_capacity(q);
    for j in 0..q {
        let vals: Vec<f64> = rows.iter().map(|r| r.theta_hat[j]).collect();
        let err2: Vec<f64> = vals.iter().map(|v| (v - template.true_theta[j]).powi(2)).collect();
        mean_theta.push(mean(&vals));
        mse_theta.push(mean(&err2));
        var_theta.push(if vals.len() > 1 { sample_variance(&vals) } else { 0.0 });
    }

    let (mut rejection_rate, mut ks_stat, mut mean_d, mut var_d, mut med_abs, mut gamma_mean) =
        (None, None, None, None, None, None);
    if alpha.is_some() {
        let d: Vec<f64> = rows.iter().filter_map(|r| r.d_hat).collect();
        let rejects = rows.iter().filter(|r| r.reject == Some(true)).count();
        rejection_rate = Some(rejects as f64 / rows.len() as f64);
        ks_stat = (d.len() >= 2).then(|| ks_normal(&d));
        mean_d = Some(mean(&d));
        var_d = (d.len() >= 2).then(|| sample_variance(&d));
        med_abs = Some(median(&d.iter().map(|v| v.abs()).collect::<Vec<_>>()));
        gamma_mean = Some(mean(&rows.iter().filter_map(|r| r.gamma_hat).collect::<Vec<_>>()));
    }

    Ok(McReport {
        case: template.case.number(),
        model: template.model.to_string(),
        n: template.n,
        h: plan.h(),
        w: plan.w(),
        reps: rows.len(),
        requested: cfg.reps,
        failures,
        mean_theta,
        mse_theta,
        var_theta,
        rejection_rate,
        ks_stat,
        mean_d_hat: mean_d,
        var_d_hat: var_d,
        median_abs_d_hat: med_abs,
        gamma_hat_mean: gamma_mean,
        outside_theory: template.model.outside_theory(),
        rows: cfg.keep_rows.then_some(rows),
        runtime_secs: start.elapsed().as_secs_f64(),
    })
}

/// Kolmogorov-Smirnov distance between the empirical CDF of `values` and `N(0,1)`.
pub fn ks_normal(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let m = v.len() as f64;
    v.iter()
        .enumerate()
        .map(|(i, &x)| {
            let f = normal_cdf(x);
            ((i + 1) as f64 / m - f).max(f - i as f64 / m)
        })
        .fold(0.0, f64::max)
}

/// Population `Gamma = 2 ||K_2||^2 int sigma_zeta^4 g dpsi` at the null,
/// with `sigma_zeta^2(z) = sigma_eps^2 + tau^2(z)` and known design density `f_Z`.
pub fn gamma_theoretical(
    model: &ModelFamily,
    noise: &NoiseSpec,
    theta0: &[f64],
    sigma_eps2: f64,
    plan: &SmoothingPlan,
    fz: &dyn Fn(&[f64]) -> f64,
) -> Result<f64> {
    let calib = Calibrator::new(model.clone(), noise.clone(), Default::default())?;
    let grid = &plan.grid;
    let terms: Vec<f64> = (0..grid.len())
        .map(|k| {
            let z = grid.node(k);
            let s2 = sigma_eps2 + calib.tau2(theta0, z)?;
            let f = fz(z);
            Ok(grid.weights()[k] * grid.density()[k] * s2 * s2 / (f * f))
        })
        .collect::<Result<_>>()?;
    let gamma = 2.0 * k2_norm_sq(&plan.kernel) * pairwise_sum(&terms);
    if !(gamma > 0.0) {
        return Err(Error::DegenerateVariance { value: gamma });
    }
    Ok(gamma)
}

/// Limiting mean `Gamma^{-1/2} int R^2 dG` of the statistic under the local
/// alternatives `m_theta0 + gamma_n r`, with `R(z) = E r(z + eta)`.
pub fn local_alt_noncentrality(
    model: &ModelFamily,
    noise: &NoiseSpec,
    theta0: &[f64],
    sigma_eps2: f64,
    plan: &SmoothingPlan,
    fz: &dyn Fn(&[f64]) -> f64,
    pert: &Perturbation,
) -> Result<f64> {
    let gamma = gamma_theoretical(model, noise, theta0, sigma_eps2, plan, fz)?;
    let rule = noise.hermite_rule(DEFAULT_HERMITE_NODES);
    let r2 = plan.grid.integrate(|z| smoothed_perturbation(pert, z, &rule).powi(2));
    Ok(r2 / gamma.sqrt())
}

/// Uniform density on `[-1,1]^d`.
pub fn uniform_box_density(d: usize) -> impl Fn(&[f64]) -> f64 {
    let v = 0.5f64.powi(d as i32);
    move |z: &[f64]| if z.iter().all(|x| x.abs() <= 1.0) { v } else { 0.0 }
}
