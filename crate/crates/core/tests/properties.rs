//! Property tests for the estimator, the test statistic and their building blocks.

use std::sync::Arc;

use proptest::prelude::*;

use mdcheck::lof::{c_hat, gamma_hat, residuals, run_test, statistic, TestOptions};
use mdcheck::mdfit::{fit_general, fit_linear_closed_form, gradient_mn, minimize, objective_mn, FitOptions, MdProblem};
use mdcheck::model::{calibrate_h, calibrate_tau2, quadrature_h, Calibrator, ModelFamily, NoiseSpec, QuadratureRule};
use mdcheck::rng::Stream;
use mdcheck::sim::{sample, Case, DgpSpec, ModelId};
use mdcheck::smooth::{density_estimate, regression_estimate, Dataset, PlanSpec, SmoothedDesign, SmoothingPlan};

fn case1_data(n: usize, seed: u64) -> Dataset {
    sample(&DgpSpec::new(Case::One, ModelId::Null, n, seed)).unwrap()
}

fn alt_data(n: usize, seed: u64) -> Dataset {
    sample(&DgpSpec::new(Case::One, ModelId::Alt(1), n, seed)).unwrap()
}

fn noise1() -> NoiseSpec {
    NoiseSpec::isotropic(1, 0.01).unwrap()
}

fn plan1(n: usize) -> SmoothingPlan {
    PlanSpec::case1(0.5, 0.5).resolve(n).unwrap()
}

fn shuffle(n: usize, seed: u64) -> Vec<usize> {
    let mut rng = Stream::new(seed);
    let mut perm: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        let j = (rng.uniform() * (i + 1) as f64) as usize;
        perm.swap(i, j.min(i));
    }
    perm
}

fn rel(a: f64, b: f64) -> f64 {
    (a - b).abs() / b.abs().max(f64::MIN_POSITIVE)
}

fn opts() -> FitOptions {
    FitOptions { covariance: false, ..FitOptions::default() }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn quadrature_matches_analytic_calibration(
        t1 in -3.0f64..3.0, t2 in -3.0f64..3.0, z1 in -1.0f64..1.0, z2 in -1.0f64..1.0,
    ) {
        let n1 = noise1();
        let rule1 = n1.hermite_rule(30);
        let lin = ModelFamily::linear_1d();
        let a = calibrate_h(&lin, &n1, &[t1], &[z1], &rule1).unwrap();
        let q = quadrature_h(&lin, &[t1], &[z1], &rule1).unwrap();
        prop_assert!((a - q).abs() <= 1e-8 * a.abs().max(1.0));

        let n2 = NoiseSpec::isotropic(2, 0.01).unwrap();
        let rule2 = n2.hermite_rule(30);
        let c2 = ModelFamily::case2_2d();
        let a = calibrate_h(&c2, &n2, &[t1, t2], &[z1, z2], &rule2).unwrap();
        let q = quadrature_h(&c2, &[t1, t2], &[z1, z2], &rule2).unwrap();
        prop_assert!(rel(q, a) <= 1e-8);
    }

    #[test]
    fn calibration_is_linear_in_the_model(a in -2.0f64..2.0, b in -2.0f64..2.0, z in -1.0f64..1.0) {
        let noise = noise1();
        let rule = noise.hermite_rule(30);
        let m1 = ModelFamily::new("sin", 1, 1, Arc::new(|t: &[f64], x: &[f64]| t[0] * x[0].sin()));
        let m2 = ModelFamily::new("cube", 1, 1, Arc::new(|t: &[f64], x: &[f64]| t[0] * x[0].powi(3)));
        let mix = ModelFamily::new(
            "mix",
            1,
            1,
            Arc::new(move |t: &[f64], x: &[f64]| t[0] * (a * x[0].sin() + b * x[0].powi(3))),
        );
        let h1 = quadrature_h(&m1, &[1.0], &[z], &rule).unwrap();
        let h2 = quadrature_h(&m2, &[1.0], &[z], &rule).unwrap();
        let hm = quadrature_h(&mix, &[1.0], &[z], &rule).unwrap();
        prop_assert!((hm - (a * h1 + b * h2)).abs() <= 1e-12);
    }

    #[test]
    fn parity_of_calibrated_means(t in -2.0f64..2.0, z in -1.0f64..1.0) {
        let noise = noise1();
        let rule = noise.hermite_rule(30);
        let even = ModelFamily::new("even", 1, 1, Arc::new(|t: &[f64], x: &[f64]| t[0] * (x[0] * x[0] + x[0].cos())));
        let hp = quadrature_h(&even, &[t], &[z], &rule).unwrap();
        let hm = quadrature_h(&even, &[t], &[-z], &rule).unwrap();
        prop_assert!((hp - hm).abs() <= 1e-12 * hp.abs().max(1.0));
        let lin = ModelFamily::linear_1d();
        let hp = calibrate_h(&lin, &noise, &[t], &[z], &rule).unwrap();
        let hm = calibrate_h(&lin, &noise, &[t], &[-z], &rule).unwrap();
        prop_assert!((hp + hm).abs() <= 1e-14);
    }

    #[test]
    fn conditional_variance_is_non_negative(t1 in -3.0f64..3.0, t2 in -3.0f64..3.0, z1 in -1.0f64..1.0, z2 in -1.0f64..1.0) {
        let n2 = NoiseSpec::isotropic(2, 0.01).unwrap();
        let rule = n2.hermite_rule(30);
        prop_assert!(calibrate_tau2(&ModelFamily::case2_2d(), &n2, &[t1, t2], &[z1, z2], &rule).unwrap() >= 0.0);
        let n1 = noise1();
        let rule = n1.hermite_rule(30);
        prop_assert!(calibrate_tau2(&ModelFamily::linear_1d(), &n1, &[t1], &[z1], &rule).unwrap() >= 0.0);
    }

    #[test]
    fn smoothing_is_permutation_invariant(seed in 0u64..1000, n in 10usize..120) {
        let data = case1_data(n, seed);
        let perm = shuffle(n, seed ^ 0xabc);
        let shuffled = data.permuted(&perm);
        let plan = plan1(n);
        let a = SmoothedDesign::new(&data, &plan).unwrap();
        let b = SmoothedDesign::new(&shuffled, &plan).unwrap();
        for (x, y) in a.fhat().iter().zip(b.fhat()) {
            prop_assert!((x - y).abs() <= 1e-13 * x.abs().max(1.0));
        }
        let ra = a.regression_on_grid(data.y());
        let rb = b.regression_on_grid(shuffled.y());
        for (x, y) in ra.iter().zip(&rb) {
            prop_assert!((x - y).abs() <= 1e-12 * x.abs().max(1.0));
        }
        let zeta = residuals(&data, &ModelFamily::linear_1d(), &noise1(), &[1.0]).unwrap();
        let zeta_p: Vec<f64> = perm.iter().map(|&i| zeta[i]).collect();
        prop_assert!(rel(c_hat(&b, &zeta_p), c_hat(&a, &zeta)) <= 1e-12);
        prop_assert!(rel(gamma_hat(&b, &zeta_p), gamma_hat(&a, &zeta)) <= 1e-12);
    }

    #[test]
    fn density_estimate_mass(seed in 0u64..1000, n in 10usize..60, bw in 0.05f64..0.6) {
        let data = case1_data(n, seed);
        let k = plan1(n).kernel_den;
        // f_hat is piecewise quadratic between the kinks Z_i +- bw, so 4-point
        // Gauss-Legendre on each piece is exact
        let inner = QuadratureRule::gauss_legendre(4, 0.0, 1.0);
        let mass = |lo: f64, hi: f64| -> f64 {
            let mut cuts = vec![lo, hi];
            for i in 0..data.n() {
                cuts.extend([data.z(i)[0] - bw, data.z(i)[0] + bw].into_iter().filter(|c| *c > lo && *c < hi));
            }
            cuts.sort_by(f64::total_cmp);
            cuts.windows(2)
                .map(|w| inner.integrate(|u| (w[1] - w[0]) * density_estimate(&data, &k, bw, &[w[0] + (w[1] - w[0]) * u[0]])))
                .sum()
        };
        let enlarged = mass(-1.0 - bw, 1.0 + bw);
        let inside = mass(-1.0, 1.0);
        prop_assert!((enlarged - 1.0).abs() < 1e-6, "{}", enlarged);
        prop_assert!(inside <= 1.0 + 1e-6);
    }

    #[test]
    fn regression_reproduces_constants(seed in 0u64..1000, n in 10usize..80, c in -5.0f64..5.0, z in -0.9f64..0.9) {
        let data = case1_data(n, seed).with_responses(vec![c; n]).unwrap();
        let plan = plan1(n);
        let h = plan.h();
        let den = density_estimate(&data, &plan.kernel, h, &[z]);
        prop_assume!(den > plan.floor);
        let est = regression_estimate(&data, &plan.kernel, h, &plan.kernel, h, &[z], plan.floor);
        prop_assert!((est - c).abs() <= 1e-12 * c.abs().max(1.0));
    }

    #[test]
    fn objective_is_non_negative_and_scales_with_g(seed in 0u64..1000, n in 20usize..150, scale in 0.1f64..10.0, t in -2.0f64..3.0) {
        let data = alt_data(n, seed);
        let plan = plan1(n);
        let mut scaled = plan.clone();
        scaled.grid = plan.grid.scaled(scale);
        let m = ModelFamily::linear_1d();
        let noise = noise1();
        let base = objective_mn(&data, &m, &noise, &plan, &[t]).unwrap();
        prop_assert!(base >= 0.0);
        let s = objective_mn(&data, &m, &noise, &scaled, &[t]).unwrap();
        prop_assert!(rel(s, scale * base) <= 1e-12);
        let a = fit_linear_closed_form(&data, &plan).unwrap().theta_hat[0];
        let b = fit_linear_closed_form(&data, &scaled).unwrap().theta_hat[0];
        prop_assert!((a - b).abs() <= 1e-10 * a.abs().max(1.0));
    }

    #[test]
    fn gradient_matches_finite_differences(seed in 0u64..1000, n in 20usize..120, t in 0.0f64..2.0) {
        let data = alt_data(n, seed);
        let plan = plan1(n);
        let m = ModelFamily::linear_1d();
        let noise = noise1();
        let g = gradient_mn(&data, &m, &noise, &plan, &[t]).unwrap()[0];
        let step = 1e-5;
        let fd = (objective_mn(&data, &m, &noise, &plan, &[t + step]).unwrap()
            - objective_mn(&data, &m, &noise, &plan, &[t - step]).unwrap())
            / (2.0 * step);
        // the objective is quadratic in theta, so central differences are exact up to rounding
        let scale = objective_mn(&data, &m, &noise, &plan, &[t]).unwrap().max(g.abs());
        prop_assert!((g - fd).abs() <= 1e-5 * scale.max(1e-12), "{} vs {}", g, fd);
    }

    #[test]
    fn accepted_steps_decrease_the_objective(seed in 0u64..200, t1 in 0.5f64..1.5, t2 in 1.5f64..2.5) {
        let data = sample(&DgpSpec::new(Case::Two, ModelId::Null, 60, seed)).unwrap();
        let plan = PlanSpec::case2().resolve(60).unwrap();
        let noise = NoiseSpec::isotropic(2, 0.01).unwrap();
        let calib = Calibrator::new(ModelFamily::case2_2d(), noise, Default::default()).unwrap();
        let problem = MdProblem::new(&data, &calib, &plan).unwrap();
        let fit = minimize(&problem, Some(&[t1, t2]), &opts()).unwrap();
        for w in fit.trace.windows(2) {
            prop_assert!(w[1] <= w[0] * (1.0 + 1e-13));
        }
        if fit.converged {
            prop_assert!(fit.grad_norm < 1e-8);
        }
    }

    #[test]
    fn statistic_pieces_scale_with_residuals(seed in 0u64..1000, n in 10usize..120, c in 0.1f64..10.0) {
        let data = case1_data(n, seed);
        let plan = plan1(n);
        let design = SmoothedDesign::new(&data, &plan).unwrap();
        let zeta = residuals(&data, &ModelFamily::linear_1d(), &noise1(), &[1.0]).unwrap();
        let g = gamma_hat(&design, &zeta);
        let ch = c_hat(&design, &zeta);
        let neg: Vec<f64> = zeta.iter().map(|z| -z).collect();
        let sc: Vec<f64> = zeta.iter().map(|z| c * z).collect();
        prop_assert!(rel(gamma_hat(&design, &neg), g) <= 1e-13);
        prop_assert!(rel(c_hat(&design, &neg), ch) <= 1e-13);
        prop_assert!(rel(gamma_hat(&design, &sc), c.powi(4) * g) <= 1e-12);
        prop_assert!(rel(c_hat(&design, &sc), c * c * ch) <= 1e-12);
    }

    #[test]
    fn statistic_ignores_grid_order(seed in 0u64..1000, n in 20usize..120) {
        let data = alt_data(n, seed);
        let plan = plan1(n);
        let mut relabeled = plan.clone();
        relabeled.grid = plan.grid.permuted(&shuffle(plan.grid.len(), seed + 7));
        let m = ModelFamily::linear_1d();
        let noise = noise1();
        let a = run_test(&data, &m, &noise, &plan, &TestOptions::default()).unwrap();
        let b = run_test(&data, &m, &noise, &relabeled, &TestOptions::default()).unwrap();
        prop_assert!((a.d_hat - b.d_hat).abs() <= 1e-9 * a.d_hat.abs().max(1.0), "{} vs {}", a.d_hat, b.d_hat);
        prop_assert_eq!(a.reject, b.reject);
    }

    #[test]
    fn closed_form_agrees_with_gauss_newton(seed in 0u64..1000, n in 20usize..200, theta in -2.0f64..2.0) {
        let mut dgp = DgpSpec::new(Case::One, ModelId::Null, n, seed);
        dgp.true_theta = vec![theta];
        let data = sample(&dgp).unwrap();
        let plan = plan1(n);
        let cf = fit_linear_closed_form(&data, &plan).unwrap();
        let gn = fit_general(&data, &ModelFamily::linear_1d(), &noise1(), &plan, Some(&[0.0]), &opts()).unwrap();
        prop_assert!((cf.theta_hat[0] - gn.theta_hat[0]).abs() <= 1e-6);
        let calib = Calibrator::new(ModelFamily::linear_1d(), noise1(), Default::default()).unwrap();
        let problem = MdProblem::new(&data, &calib, &plan).unwrap();
        let t = statistic(&problem, &gn, 0.05).unwrap();
        prop_assert!((0.0..=1.0).contains(&t.p_value));
    }
}

#[test]
fn grid_refinement_changes_objective_little() {
    let m = ModelFamily::linear_1d();
    let noise = noise1();
    for seed in 0..10u64 {
        let data = case1_data(100, 300 + seed);
        let coarse = plan1(100);
        let mut spec = PlanSpec::case1(0.5, 0.5);
        spec.grid_counts = vec![802];
        let fine = spec.resolve(100).unwrap();
        let a = objective_mn(&data, &m, &noise, &coarse, &[1.0]).unwrap();
        let b = objective_mn(&data, &m, &noise, &fine, &[1.0]).unwrap();
        assert!(rel(a, b) < 1e-3, "seed {seed}: {a} vs {b}");
    }
}
