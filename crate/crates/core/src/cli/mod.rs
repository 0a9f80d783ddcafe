//! Command-line front end.

pub mod config;
pub mod reproduce;

use std::ffi::OsString;
use std::fs::File;
use std::io::{BufReader, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::error::{Error, Result};
use crate::lof::{run_test, TestOptions, TestResult};
use crate::mdfit::{fit_general, FitOptions, FitResult};
use crate::sim::{naive_j_demo, run_mc, Case, DemoOptions, DgpSpec, McConfig, McReport, ModelId, NaiveDemo};
use crate::smooth::Dataset;

pub use config::{RunConfig, Settings};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_RUNTIME: i32 = 2;
pub const EXIT_CHECK: i32 = 3;

#[derive(Debug, Parser)]
#[command(name = "mdcheck", version, about = "Minimum-distance fitting and lack-of-fit testing under Berkson measurement error")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Fit a parametric family to a CSV dataset.
    Fit(CommonArgs),
    /// Fit and run the lack-of-fit test on a CSV dataset.
    Test(CommonArgs),
    /// Run Monte Carlo replications of one simulation setting.
    Simulate(CommonArgs),
    /// Rerun a shipped table or figure preset and compare with reference values.
    Reproduce(ReproduceArgs),
    /// Naive deconvolution-weighted regression curves for one sample.
    Demo(CommonArgs),
}

#[derive(Debug, Clone, Args)]
pub struct CommonArgs {
    /// JSON config file; flags override its values.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[command(flatten)]
    pub settings: Settings,
}

#[derive(Debug, Clone, Args)]
pub struct ReproduceArgs {
    /// table1, table2, table3, table4 or figure1.
    pub table_id: String,
    /// Keep only rows with these bandwidth constants, e.g. "0.5,0.5".
    #[arg(long)]
    pub only: Option<String>,
    /// Exit with status 3 when a reference tolerance is violated.
    #[arg(long)]
    pub check: bool,
    #[command(flatten)]
    pub common: CommonArgs,
}

/// Parses `args` (including the program name) and runs the command; returns the exit status.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    match execute(cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                Error::Config(_) => EXIT_USAGE,
                _ => EXIT_RUNTIME,
            }
        }
    }
}

fn execute(command: Command) -> Result<i32> {
    match command {
        Command::Fit(args) => cmd_fit(&load(&args, "fit")?).map(|_| EXIT_OK),
        Command::Test(args) => cmd_test(&load(&args, "test")?).map(|_| EXIT_OK),
        Command::Simulate(args) => cmd_simulate(&load(&args, "simulate")?).map(|_| EXIT_OK),
        Command::Demo(args) => cmd_demo(&load(&args, "demo")?).map(|_| EXIT_OK),
        Command::Reproduce(args) => {
            let cfg = load(&args.common, "reproduce")?;
            let passed = reproduce::cmd_reproduce(&args.table_id, args.only.as_deref(), &cfg)?;
            Ok(if args.check && !passed { EXIT_CHECK } else { EXIT_OK })
        }
    }
}

/// Layers flags over the config file over defaults.
pub fn load(args: &CommonArgs, command: &str) -> Result<RunConfig> {
    let file = match &args.config {
        Some(path) => Settings::from_file(path)?,
        None => Settings::default(),
    };
    if let Some(c) = &file.command {
        if c != command {
            return Err(Error::Config(format!("command: config file is for '{c}' but '{command}' was invoked")));
        }
    }
    RunConfig::new(file.overlay(&args.settings))
}

fn read_dataset(cfg: &RunConfig) -> Result<Dataset> {
    let path = cfg.settings.input.as_ref().ok_or_else(|| Error::Config("input: a dataset CSV is required".into()))?;
    let file =
        File::open(path).map_err(|e| Error::Config(format!("input: cannot open {}: {e}", path.display())))?;
    let data = Dataset::from_csv(BufReader::new(file))?;
    if let Some(n) = cfg.settings.n {
        if n != data.n() {
            return Err(Error::Config(format!("n: set to {n} but {} has {} rows", path.display(), data.n())));
        }
    }
    Ok(data)
}

fn warn_bandwidth(cfg: &RunConfig, n: usize, d: usize) -> Result<()> {
    if let Some(w) = cfg.bandwidth_warning(n, d)? {
        eprintln!("warning: {w}");
    }
    Ok(())
}

fn fit_options(cfg: &RunConfig) -> FitOptions {
    FitOptions { sigma_eps2: cfg.settings.sigma_eps2, ..FitOptions::default() }
}

pub fn cmd_fit(cfg: &RunConfig) -> Result<FitResult> {
    let data = read_dataset(cfg)?;
    let model = cfg.model()?;
    check_dim(model.design_dim(), data.d())?;
    warn_bandwidth(cfg, data.n(), data.d())?;
    let noise = cfg.noise(data.d())?;
    let plan = cfg.plan_spec(data.d())?.resolve(data.n())?;
    let fit = fit_general(&data, &model, &noise, &plan, cfg.settings.theta_init.as_deref(), &fit_options(cfg))?;
    print!("{}", format_fit(&fit));
    if let Some(out) = &cfg.settings.output {
        write_fit(out, &fit)?;
    }
    Ok(fit)
}

pub fn cmd_test(cfg: &RunConfig) -> Result<TestResult> {
    let data = read_dataset(cfg)?;
    let model = cfg.model()?;
    check_dim(model.design_dim(), data.d())?;
    warn_bandwidth(cfg, data.n(), data.d())?;
    let noise = cfg.noise(data.d())?;
    let plan = cfg.plan_spec(data.d())?.resolve(data.n())?;
    let opts = TestOptions {
        alpha: cfg.alpha,
        theta_init: cfg.settings.theta_init.clone(),
        fit: FitOptions { covariance: false, ..fit_options(cfg) },
    };
    let result = run_test(&data, &model, &noise, &plan, &opts)?;
    print!("{}", format_test(&result));
    if let Some(out) = &cfg.settings.output {
        write_test(out, &result)?;
    }
    Ok(result)
}

pub fn cmd_simulate(cfg: &RunConfig) -> Result<McReport> {
    let s = &cfg.settings;
    let case = Case::from_number(s.case.unwrap_or(1))?;
    let model_id = ModelId::parse(s.model_id.as_deref().unwrap_or("0"))?;
    let n = s.n.unwrap_or(200);
    let plan = cfg.plan_spec(case.dim())?;
    warn_bandwidth(cfg, n, case.dim())?;
    let mut mc = McConfig::new(s.reps.unwrap_or(1000), cfg.task()?, plan);
    mc.alpha = cfg.alpha;
    mc.threads = cfg.threads;
    mc.theta_init = s.theta_init.clone().or_else(|| (case == Case::Two).then(|| vec![0.8, 1.8]));
    mc.keep_rows = s.raw_output.is_some();
    let report = run_mc(&DgpSpec::new(case, model_id, n, cfg.seed), &mc)?;
    print!("{}", format_report(&report));
    eprintln!("runtime: {:.1}s", report.runtime_secs);
    if let Some(out) = &s.output {
        write_reports(out, std::slice::from_ref(&report))?;
    }
    if let Some(raw) = &s.raw_output {
        write_raw(raw, &report)?;
    }
    Ok(report)
}

pub fn cmd_demo(cfg: &RunConfig) -> Result<NaiveDemo> {
    let n = cfg.settings.n.unwrap_or(500);
    if n < 2 {
        return Err(Error::Config("n: the demo needs at least 2 observations".into()));
    }
    let mut opts = DemoOptions::default();
    if let Some(h) = cfg.settings.h {
        opts.h = Some(h);
    }
    let demo = naive_j_demo(n, cfg.seed, &opts);
    println!("n = {}, seed = {}, h = {:.4}", demo.n, demo.seed, demo.h);
    println!("L2 distance to J:   {:.4}", demo.l2_to_j);
    println!("L2 distance to x^2: {:.4}", demo.l2_to_mu);
    if let Some(out) = &cfg.settings.output {
        write_curves(out, &demo)?;
    }
    Ok(demo)
}

fn check_dim(model_d: usize, data_d: usize) -> Result<()> {
    if model_d != data_d {
        return Err(Error::InvalidInput(format!(
            "model expects {model_d} design columns but the dataset has {data_d}"
        )));
    }
    Ok(())
}

pub(crate) fn create(path: &Path) -> Result<File> {
    if let Some(dir) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    Ok(File::create(path)?)
}

fn is_json(path: &Path) -> bool {
    path.extension().is_some_and(|e| e.eq_ignore_ascii_case("json"))
}

pub fn format_fit(fit: &FitResult) -> String {
    let theta: Vec<String> = fit.theta_hat.iter().map(|t| format!("{t:.4}")).collect();
    let mut s = format!(
        "theta_hat:     {}\nobjective:     {:.4e}\niterations:    {}\nconverged:     {}\ngrad_norm:     {:.3e}\nfloored_nodes: {}\n",
        theta.join(" "),
        fit.objective,
        fit.iterations,
        fit.converged,
        fit.grad_norm,
        fit.floored_nodes
    );
    if let Some(cov) = &fit.covariance {
        let q = fit.theta_hat.len();
        let se: Vec<String> = (0..q).map(|j| format!("{:.4}", cov.asym_cov[(j, j)].sqrt())).collect();
        s.push_str(&format!("asym_sd:       {}\n", se.join(" ")));
    }
    s
}

fn write_fit(path: &Path, fit: &FitResult) -> Result<()> {
    let file = create(path)?;
    if is_json(path) {
        serde_json::to_writer_pretty(file, fit)?;
        return Ok(());
    }
    let mut wtr = csv::Writer::from_writer(file);
    let q = fit.theta_hat.len();
    let mut header: Vec<String> = (1..=q).map(|j| format!("theta_hat_{j}")).collect();
    header.extend(["objective", "iterations", "converged", "grad_norm", "floored_nodes"].map(String::from));
    wtr.write_record(&header)?;
    let mut row: Vec<String> = fit.theta_hat.iter().map(|t| t.to_string()).collect();
    row.push(fit.objective.to_string());
    row.push(fit.iterations.to_string());
    row.push(fit.converged.to_string());
    row.push(fit.grad_norm.to_string());
    row.push(fit.floored_nodes.to_string());
    wtr.write_record(&row)?;
    wtr.flush()?;
    Ok(())
}

pub fn format_test(t: &TestResult) -> String {
    let theta: Vec<String> = t.theta_hat.iter().map(|v| format!("{v:.4}")).collect();
    format!(
        "theta_hat:     {}\nM_n:           {:.4e}\nC_hat:         {:.4e}\nGamma_hat:     {:.4e}\nD_hat:         {:.4}\np_value:       {:.4}\ndecision:      {} at alpha = {}\nfloored_nodes: {}\n",
        theta.join(" "),
        t.mn_value,
        t.c_hat,
        t.gamma_hat,
        t.d_hat,
        t.p_value,
        if t.reject { "reject" } else { "fail to reject" },
        t.alpha,
        t.floored_nodes
    )
}

fn write_test(path: &Path, t: &TestResult) -> Result<()> {
    let file = create(path)?;
    if is_json(path) {
        serde_json::to_writer_pretty(file, t)?;
        return Ok(());
    }
    let mut wtr = csv::Writer::from_writer(file);
    wtr.write_record(TestResult::csv_header(t.theta_hat.len()))?;
    wtr.write_record(t.csv_fields())?;
    wtr.flush()?;
    Ok(())
}

/// Reads a test result written by `test --output <file>.csv`.
pub fn read_test(path: &Path) -> Result<TestResult> {
    let mut rdr = csv::Reader::from_path(path)?;
    let record = rdr
        .records()
        .next()
        .ok_or_else(|| Error::InvalidInput(format!("{} has no result row", path.display())))??;
    let fields: Vec<&str> = record.iter().collect();
    TestResult::from_csv_fields(&fields)
}

fn opt4(v: Option<f64>) -> String {
    v.map_or_else(|| "-".into(), |x| format!("{x:.4}"))
}

pub fn format_report(r: &McReport) -> String {
    let fmt = |v: &[f64]| v.iter().map(|x| format!("{x:.4}")).collect::<Vec<_>>().join(" ");
    let mut s = format!(
        "case {} model {} n = {} (h = {:.4}, w = {:.4}): {} of {} replications succeeded\n",
        r.case, r.model, r.n, r.h, r.w, r.reps, r.requested
    );
    s.push_str(&format!("mean theta_hat: {}\nMSE theta_hat:  {}\n", fmt(&r.mean_theta), fmt(&r.mse_theta)));
    if r.rejection_rate.is_some() {
        s.push_str(&format!(
            "rejection rate: {}\nmean D_hat:     {}\nvar D_hat:      {}\nKS vs N(0,1):   {}\n",
            opt4(r.rejection_rate),
            opt4(r.mean_d_hat),
            opt4(r.var_d_hat),
            opt4(r.ks_stat)
        ));
    }
    if r.outside_theory {
        s.push_str("note: this model violates the smoothness assumptions of the asymptotic theory\n");
    }
    s
}

fn csv_opt(v: Option<f64>) -> String {
    v.map_or_else(String::new, |x| x.to_string())
}

/// One CSV row per configuration; full precision, no timing columns.
pub fn write_reports(path: &Path, reports: &[McReport]) -> Result<()> {
    let file = create(path)?;
    if is_json(path) {
        serde_json::to_writer_pretty(file, reports)?;
        return Ok(());
    }
    let q = reports.first().map_or(0, |r| r.mean_theta.len());
    let mut wtr = csv::Writer::from_writer(file);
    let mut header: Vec<String> =
        ["case", "model", "n", "h", "w", "reps", "requested", "failures"].map(String::from).to_vec();
    header.extend((1..=q).map(|j| format!("mean_theta_{j}")));
    header.extend((1..=q).map(|j| format!("mse_theta_{j}")));
    header.extend((1..=q).map(|j| format!("var_theta_{j}")));
    header.extend(
        ["rejection_rate", "ks_stat", "mean_d_hat", "var_d_hat", "median_abs_d_hat", "gamma_hat_mean", "outside_theory"]
            .map(String::from),
    );
    wtr.write_record(&header)?;
    for r in reports {
        let mut row = vec![
            r.case.to_string(),
            r.model.clone(),
            r.n.to_string(),
            r.h.to_string(),
            r.w.to_string(),
            r.reps.to_string(),
            r.requested.to_string(),
            r.failures.to_string(),
        ];
        for v in [&r.mean_theta, &r.mse_theta, &r.var_theta] {
            row.extend(v.iter().map(|x| x.to_string()));
        }
        for v in [r.rejection_rate, r.ks_stat, r.mean_d_hat, r.var_d_hat, r.median_abs_d_hat, r.gamma_hat_mean] {
            row.push(csv_opt(v));
        }
        row.push(r.outside_theory.to_string());
        wtr.write_record(&row)?;
    }
    wtr.flush()?;
    Ok(())
}

fn write_raw(path: &Path, r: &McReport) -> Result<()> {
    let rows = r.rows.as_deref().unwrap_or_default();
    let q = r.mean_theta.len();
    let mut wtr = csv::Writer::from_writer(create(path)?);
    let mut header = vec!["rep".to_string()];
    header.extend((1..=q).map(|j| format!("theta_hat_{j}")));
    header.extend(["d_hat", "p_value", "reject"].map(String::from));
    wtr.write_record(&header)?;
    for row in rows {
        let mut rec = vec![row.rep.to_string()];
        rec.extend(row.theta_hat.iter().map(|t| t.to_string()));
        rec.push(csv_opt(row.d_hat));
        rec.push(csv_opt(row.p_value));
        rec.push(row.reject.map_or_else(String::new, |b| b.to_string()));
        wtr.write_record(&rec)?;
    }
    wtr.flush()?;
    Ok(())
}

/// Columns `x, j_hat, j, x_squared`.
pub fn write_curves(path: &Path, demo: &NaiveDemo) -> Result<()> {
    let mut file = create(path)?;
    writeln!(file, "x,j_hat,j,x_squared")?;
    for c in &demo.curves {
        writeln!(file, "{},{},{},{}", c.x, c.j_hat, c.j, c.mu)?;
    }
    Ok(())
}
