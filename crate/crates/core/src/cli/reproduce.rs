//! Reruns the shipped table and figure presets.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::Deserialize;

use super::config::RunConfig;
use super::{create, write_curves};
use crate::error::{Error, Result};
use crate::sim::{naive_j_demo, run_mc, Case, DemoOptions, DgpSpec, McConfig, McReport, ModelId, Task};
use crate::smooth::PlanSpec;

const TABLE1: &str = include_str!("../../../../presets/table1.json");
const TABLE2: &str = include_str!("../../../../presets/table2.json");
const TABLE3: &str = include_str!("../../../../presets/table3.json");
const TABLE4: &str = include_str!("../../../../presets/table4.json");
const FIGURE1: &str = include_str!("../../../../presets/figure1.json");

pub const PRESET_IDS: [&str; 5] = ["table1", "table2", "table3", "table4", "figure1"];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    MeanTheta,
    MseTheta,
    RejectionRate,
}

/// Accepted interval for one cell; either bound may be open.
#[derive(Debug, Clone, Copy, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CellCheck {
    pub n: usize,
    pub lo: Option<f64>,
    pub hi: Option<f64>,
}

impl CellCheck {
    pub fn accepts(&self, v: f64) -> bool {
        self.lo.is_none_or(|lo| v >= lo) && self.hi.is_none_or(|hi| v <= hi)
    }

    fn describe(&self) -> String {
        match (self.lo, self.hi) {
            (Some(lo), Some(hi)) => format!("[{lo}, {hi}]"),
            (Some(lo), None) => format!(">= {lo}"),
            (None, Some(hi)) => format!("<= {hi}"),
            (None, None) => "any".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PresetRow {
    pub label: String,
    pub model_id: String,
    pub a: Option<f64>,
    pub b: Option<f64>,
    pub metric: Metric,
    #[serde(default)]
    pub component: usize,
    /// One reference value per entry of `sizes`.
    pub reference: Vec<f64>,
    #[serde(default)]
    pub checks: Vec<CellCheck>,
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TablePreset {
    pub id: String,
    pub title: String,
    pub case: u32,
    pub task: Task,
    pub reps: usize,
    pub seed: u64,
    pub sizes: Vec<usize>,
    #[serde(default)]
    pub theta_init: Option<Vec<f64>>,
    pub rows: Vec<PresetRow>,
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FigurePreset {
    pub id: String,
    pub title: String,
    pub n: usize,
    pub seeds: usize,
    pub seed: u64,
    pub min_wins: usize,
}

pub fn table_preset(id: &str) -> Result<TablePreset> {
    let text = match id {
        "table1" => TABLE1,
        "table2" => TABLE2,
        "table3" => TABLE3,
        "table4" => TABLE4,
        _ => return Err(unknown(id)),
    };
    Ok(serde_json::from_str(text)?)
}

pub fn figure_preset() -> Result<FigurePreset> {
    Ok(serde_json::from_str(FIGURE1)?)
}

fn unknown(id: &str) -> Error {
    Error::Config(format!("table_id: expected one of {}, got '{id}'", PRESET_IDS.join(", ")))
}

/// One computed cell of a reproduced table.
#[derive(Debug, Clone, PartialEq)]
pub struct Cell {
    pub row: usize,
    pub n: usize,
    pub value: f64,
    pub reference: Option<f64>,
    pub check: Option<CellCheck>,
}

impl Cell {
    pub fn passed(&self) -> Option<bool> {
        self.check.map(|c| c.accepts(self.value))
    }
}

/// Parses `--only "a,b"`.
pub fn parse_only(s: &str) -> Result<(f64, f64)> {
    let parts: Vec<&str> = s.split(',').map(str::trim).collect();
    let bad = || Error::Config(format!("only: expected \"a,b\", got '{s}'"));
    if parts.len() != 2 {
        return Err(bad());
    }
    let a = parts[0].parse().map_err(|_| bad())?;
    let b = parts[1].parse().map_err(|_| bad())?;
    Ok((a, b))
}

fn same(x: f64, y: f64) -> bool {
    (x - y).abs() < 1e-9
}

/// Runs `table_id` and writes `<table_id>.csv` and `<table_id>.md` to the
/// output directory; returns whether every checked cell passed.
pub fn cmd_reproduce(table_id: &str, only: Option<&str>, cfg: &RunConfig) -> Result<bool> {
    let out_dir = cfg.settings.output.clone().unwrap_or_else(|| PathBuf::from("."));
    if table_id == "figure1" {
        return reproduce_figure(cfg, &out_dir);
    }
    let preset = table_preset(table_id)?;
    let only = only.map(parse_only).transpose()?;
    let (cells, preset) = run_table(&preset, only, cfg)?;
    write_table_csv(&out_dir.join(format!("{}.csv", preset.id)), &preset, &cells)?;
    let md = table_markdown(&preset, &cells);
    let mut f = create(&out_dir.join(format!("{}.md", preset.id)))?;
    std::io::Write::write_all(&mut f, md.as_bytes())?;
    print!("{}", comparison(&preset, &cells));
    Ok(cells.iter().all(|c| c.passed() != Some(false)))
}

/// Runs the Monte Carlo configurations behind the selected rows.
/// Returns the cells and the preset restricted to those rows and sizes.
pub fn run_table(preset: &TablePreset, only: Option<(f64, f64)>, cfg: &RunConfig) -> Result<(Vec<Cell>, TablePreset)> {
    let mut preset = preset.clone();
    if let Some((a, b)) = only {
        preset.rows.retain(|r| r.a.is_some_and(|x| same(x, a)) && r.b.is_some_and(|x| same(x, b)));
        if preset.rows.is_empty() {
            return Err(Error::Config(format!("only: no rows of {} have (a,b) = ({a},{b})", preset.id)));
        }
    }
    let mut refs_by_size: Vec<Vec<Option<f64>>> =
        preset.rows.iter().map(|r| r.reference.iter().copied().map(Some).collect()).collect();
    if let Some(n) = cfg.settings.n {
        match preset.sizes.iter().position(|&m| m == n) {
            Some(j) => refs_by_size = refs_by_size.iter().map(|r| vec![r.get(j).copied().flatten()]).collect(),
            None => refs_by_size = vec![vec![None]; preset.rows.len()],
        }
        preset.sizes = vec![n];
    }
    let reps = cfg.settings.reps.unwrap_or(preset.reps);
    preset.reps = reps;
    let seed = cfg.settings.seed.unwrap_or(preset.seed);
    let case = Case::from_number(preset.case)?;

    let mut reports: BTreeMap<(String, String, String, usize), McReport> = BTreeMap::new();
    let mut cells = Vec::new();
    for (ri, row) in preset.rows.iter().enumerate() {
        let model_id = ModelId::parse(&row.model_id)?;
        for (j, &n) in preset.sizes.iter().enumerate() {
            let key = (row.model_id.clone(), fmt_opt(row.a), fmt_opt(row.b), n);
            if !reports.contains_key(&key) {
                let plan = match (case, row.a, row.b) {
                    (Case::One, a, b) => PlanSpec::case1(a.unwrap_or(0.5), b.unwrap_or(0.5)),
                    (Case::Two, _, _) => PlanSpec::case2(),
                };
                let mut mc = McConfig::new(reps, preset.task, plan);
                mc.alpha = cfg.alpha;
                mc.threads = cfg.threads;
                mc.theta_init = preset.theta_init.clone();
                let start = Instant::now();
                let report = run_mc(&DgpSpec::new(case, model_id, n, seed), &mc)?;
                eprintln!(
                    "{}: model {}{} n={} done in {:.1}s",
                    preset.id,
                    row.model_id,
                    row.a.map(|a| format!(" (a,b)=({a},{})", row.b.unwrap_or(a))).unwrap_or_default(),
                    n,
                    start.elapsed().as_secs_f64()
                );
                reports.insert(key.clone(), report);
            }
            let report = &reports[&key];
            let value = metric_value(report, row.metric, row.component)?;
            cells.push(Cell {
                row: ri,
                n,
                value,
                reference: refs_by_size[ri].get(j).copied().flatten(),
                check: row.checks.iter().find(|c| c.n == n).copied(),
            });
        }
    }
    Ok((cells, preset))
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(String::new, |x| x.to_string())
}

fn metric_value(r: &McReport, metric: Metric, component: usize) -> Result<f64> {
    let missing = || Error::InvalidInput(format!("metric {metric:?} component {component} unavailable"));
    match metric {
        Metric::MeanTheta => r.mean_theta.get(component).copied().ok_or_else(missing),
        Metric::MseTheta => r.mse_theta.get(component).copied().ok_or_else(missing),
        Metric::RejectionRate => r.rejection_rate.ok_or_else(missing),
    }
}

fn row_label(row: &PresetRow) -> String {
    match (row.a, row.b) {
        (Some(a), Some(b)) => format!("{} (a,b)=({a},{b})", row.label),
        _ => row.label.clone(),
    }
}

fn write_table_csv(path: &Path, preset: &TablePreset, cells: &[Cell]) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(create(path)?);
    wtr.write_record(["table", "label", "model_id", "a", "b", "metric", "component", "n", "value", "reference", "deviation", "check"])?;
    for c in cells {
        let row = &preset.rows[c.row];
        let metric = match row.metric {
            Metric::MeanTheta => "mean_theta",
            Metric::MseTheta => "mse_theta",
            Metric::RejectionRate => "rejection_rate",
        };
        wtr.write_record([
            preset.id.clone(),
            row.label.clone(),
            row.model_id.clone(),
            fmt_opt(row.a),
            fmt_opt(row.b),
            metric.to_string(),
            (row.component + 1).to_string(),
            c.n.to_string(),
            c.value.to_string(),
            fmt_opt(c.reference),
            fmt_opt(c.reference.map(|r| c.value - r)),
            match c.passed() {
                Some(true) => "pass".into(),
                Some(false) => "fail".into(),
                None => String::new(),
            },
        ])?;
    }
    wtr.flush()?;
    Ok(())
}

/// Markdown table in the published layout, `value (reference)` per cell.
pub fn table_markdown(preset: &TablePreset, cells: &[Cell]) -> String {
    let mut s = format!("# {}\n\n", preset.title);
    let has_ab = preset.rows.iter().any(|r| r.a.is_some());
    s.push_str(if has_ab { "| Row | a, b |" } else { "| Row |" });
    for n in &preset.sizes {
        let _ = write!(s, " n = {n} |");
    }
    s.push('\n');
    s.push_str(if has_ab { "|---|---|" } else { "|---|" });
    s.push_str(&"---:|".repeat(preset.sizes.len()));
    s.push('\n');
    for (ri, row) in preset.rows.iter().enumerate() {
        let _ = write!(s, "| {} |", row.label);
        if has_ab {
            let _ = write!(s, " {}, {} |", fmt_opt(row.a), fmt_opt(row.b));
        }
        for c in cells.iter().filter(|c| c.row == ri) {
            match c.reference {
                Some(r) => {
                    let _ = write!(s, " {:.4} ({r:.4}) |", c.value);
                }
                None => {
                    let _ = write!(s, " {:.4} |", c.value);
                }
            }
        }
        s.push('\n');
    }
    s.push_str(&format!("\nReplications per cell: {}. Reference values in parentheses.\n", preset.reps));
    s
}

/// Per-cell comparison against the reference values.
pub fn comparison(preset: &TablePreset, cells: &[Cell]) -> String {
    let mut s = format!("{}\n", preset.title);
    for c in cells {
        let row = &preset.rows[c.row];
        let _ = write!(s, "  {:<28} n={:<4} {:>8.4}", row_label(row), c.n, c.value);
        if let Some(r) = c.reference {
            let _ = write!(s, "   ref {r:.4}   dev {:+.4}", c.value - r);
        }
        if let Some(chk) = c.check {
            let verdict = if chk.accepts(c.value) { "ok" } else { "OUT OF TOLERANCE" };
            let _ = write!(s, "   {} {verdict}", chk.describe());
        }
        s.push('\n');
    }
    s
}

/// Result of the naive-estimator study over many seeds.
#[derive(Debug, Clone, PartialEq)]
pub struct FigureSummary {
    pub n: usize,
    pub seeds: usize,
    pub wins: usize,
    pub min_wins: usize,
    pub mean_l2_to_j: f64,
    pub mean_l2_to_mu: f64,
}

/// Counts seeds where the naive estimate is closer to `J` than to `x^2`.
pub fn figure_study(n: usize, seed: u64, seeds: usize, min_wins: usize) -> FigureSummary {
    let opts = DemoOptions::default();
    let (mut wins, mut to_j, mut to_mu) = (0, 0.0, 0.0);
    for s in 0..seeds {
        let demo = naive_j_demo(n, seed.wrapping_add(s as u64), &opts);
        if demo.l2_to_j < demo.l2_to_mu {
            wins += 1;
        }
        to_j += demo.l2_to_j;
        to_mu += demo.l2_to_mu;
    }
    let m = seeds.max(1) as f64;
    FigureSummary { n, seeds, wins, min_wins, mean_l2_to_j: to_j / m, mean_l2_to_mu: to_mu / m }
}

fn reproduce_figure(cfg: &RunConfig, out_dir: &Path) -> Result<bool> {
    let preset = figure_preset()?;
    let n = cfg.settings.n.unwrap_or(preset.n);
    if n < 2 {
        return Err(Error::Config("n: the figure needs at least 2 observations".into()));
    }
    let seed = cfg.settings.seed.unwrap_or(preset.seed);
    let seeds = cfg.settings.reps.unwrap_or(preset.seeds);
    let min_wins = (preset.min_wins * seeds).div_ceil(preset.seeds);
    let demo = naive_j_demo(n, seed, &DemoOptions::default());
    write_curves(&out_dir.join(format!("{}.csv", preset.id)), &demo)?;
    let summary = figure_study(n, seed, seeds, min_wins);
    let passed = summary.wins >= min_wins;
    let md = format!(
        "# {}\n\nn = {}, bandwidth h = {:.4} for seed {}.\n\n| Quantity | Value |\n|---|---:|\n| seeds closer to J than to x^2 | {} of {} |\n| mean L2 distance to J | {:.4} |\n| mean L2 distance to x^2 | {:.4} |\n\nCurves for seed {} are in `{}.csv` (columns x, j_hat, j, x_squared).\n",
        preset.title, n, demo.h, seed, summary.wins, seeds, summary.mean_l2_to_j, summary.mean_l2_to_mu, seed, preset.id
    );
    let mut f = create(&out_dir.join(format!("{}.md", preset.id)))?;
    std::io::Write::write_all(&mut f, md.as_bytes())?;
    println!("{}", preset.title);
    println!("  seeds closer to J than to x^2: {} of {} (need {})   {}", summary.wins, seeds, min_wins, if passed { "ok" } else { "OUT OF TOLERANCE" });
    println!("  mean L2 distance to J:   {:.4}", summary.mean_l2_to_j);
    println!("  mean L2 distance to x^2: {:.4}", summary.mean_l2_to_mu);
    Ok(passed)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_parse() {
        for id in ["table1", "table2", "table3", "table4"] {
            let p = table_preset(id).unwrap();
            assert_eq!(p.id, id);
            for row in &p.rows {
                assert_eq!(row.reference.len(), p.sizes.len(), "{id} {}", row.label);
                assert!(row.checks.iter().all(|c| p.sizes.contains(&c.n)));
            }
        }
        assert_eq!(figure_preset().unwrap().n, 500);
        assert!(table_preset("table9").is_err());
    }

    #[test]
    fn only_filter_parses() {
        assert_eq!(parse_only("0.5, 0.5").unwrap(), (0.5, 0.5));
        assert!(parse_only("0.5").is_err());
        assert!(parse_only("x,1").is_err());
    }

    #[test]
    fn one_sided_checks() {
        let c = CellCheck { n: 100, lo: Some(0.99), hi: None };
        assert!(c.accepts(1.0));
        assert!(!c.accepts(0.98));
    }
}
