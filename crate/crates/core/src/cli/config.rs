//! Run configuration: a JSON document merged with command-line flags.

use std::path::{Path, PathBuf};

use clap::Args;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{FamilyRegistry, ModelFamily, NoiseSpec};
use crate::sim::{Case, ModelId, Task};
use crate::smooth::{h3_warning, BandwidthRule, KernelKind, PlanSpec, DEFAULT_DENSITY_FLOOR};

/// Every configurable key. All fields are optional so a file and a flag set
/// can be layered; `deny_unknown_fields` rejects misspelled keys.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize, Args)]
#[serde(deny_unknown_fields)]
pub struct Settings {
    /// Subcommand named in a config file; must match the one invoked.
    #[arg(skip)]
    pub command: Option<String>,
    /// Model family name (linear-1d, case2-2d, poly-1d, constant-1d).
    #[arg(long)]
    pub model: Option<String>,
    /// Number of terms for poly-1d.
    #[arg(long)]
    pub terms: Option<usize>,
    /// Per-coordinate variances of the Berkson error eta.
    #[arg(long, value_delimiter = ',')]
    pub noise_variances: Option<Vec<f64>>,
    /// epanechnikov or uniform.
    #[arg(long)]
    pub kernel: Option<String>,
    /// Bandwidth rule: case1, case2 or explicit.
    #[arg(long)]
    pub bandwidth: Option<String>,
    /// Constant in the case1 rule h = a n^{-1/3}
    #[arg(long)]
    pub a: Option<f64>,
    /// Constant in the case1 rule w = b (ln n / n)^{1/5}
    #[arg(long)]
    pub b: Option<f64>,
    /// Explicit regression bandwidth
    #[arg(long)]
    pub h: Option<f64>,
    /// Explicit density bandwidth
    #[arg(long)]
    pub w: Option<f64>,
    /// Grid nodes per axis.
    #[arg(long, value_delimiter = ',')]
    pub grid: Option<Vec<usize>>,
    /// Integration box as lo,hi pairs, e.g. -1,1,-1,1.
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
    pub region: Option<Vec<f64>>,
    /// Floor on the denominator density estimate.
    #[arg(long)]
    pub floor: Option<f64>,
    /// Nominal test level
    #[arg(long)]
    pub alpha: Option<f64>,
    /// Gauss-Newton starting point, comma separated
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
    pub theta_init: Option<Vec<f64>>,
    /// Base seed; replication r uses seed + r
    #[arg(long)]
    pub seed: Option<u64>,
    /// Monte Carlo replications (seeds for figure1)
    #[arg(long)]
    pub reps: Option<usize>,
    /// Sample size
    #[arg(long)]
    pub n: Option<usize>,
    /// Simulation setting, 1 or 2.
    #[arg(long)]
    pub case: Option<u32>,
    /// 0, 1, 2, 3 or local-alt.
    #[arg(long)]
    pub model_id: Option<String>,
    /// fit, test or both.
    #[arg(long)]
    pub task: Option<String>,
    /// Input CSV with columns z1..zd,y
    #[arg(long)]
    pub input: Option<PathBuf>,
    /// Output file (.json or .csv) or, for reproduce, a directory
    #[arg(long)]
    pub output: Option<PathBuf>,
    /// Per-replication CSV written by `simulate`.
    #[arg(long)]
    pub raw_output: Option<PathBuf>,
    /// Worker threads for Monte Carlo runs.
    #[arg(long)]
    pub threads: Option<usize>,
    /// Known error variance for the plug-in covariance.
    #[arg(long)]
    pub sigma_eps2: Option<f64>,
}

macro_rules! overlay {
    ($base:ident, $top:ident, $($field:ident),*) => {
        $( if $top.$field.is_some() { $base.$field = $top.$field.clone(); } )*
    };
}

impl Settings {
    pub fn from_json_str(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Config(format!("config file: {e}")))
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config file {}: {e}", path.display())))?;
        Self::from_json_str(&text)
    }

    /// Values in `top` win over values in `self`.
    pub fn overlay(mut self, top: &Settings) -> Self {
        overlay!(
            self, top, model, terms, noise_variances, kernel, bandwidth, a, b, h, w, grid, region, floor, alpha,
            command, theta_init, seed, reps, n, case, model_id, task, input, output, raw_output, threads, sigma_eps2
        );
        self
    }
}

pub const THREADS_ENV: &str = "MDCHECK_THREADS";
pub const DEFAULT_SEED: u64 = 20240101;
pub const COMMANDS: [&str; 5] = ["fit", "test", "simulate", "reproduce", "demo"];

/// Validated settings with defaults filled in.
#[derive(Debug, Clone)]
pub struct RunConfig {
    pub settings: Settings,
    pub alpha: f64,
    pub seed: u64,
    pub threads: usize,
}

impl RunConfig {
    pub fn new(settings: Settings) -> Result<Self> {
        let alpha = settings.alpha.unwrap_or(0.05);
        if !(alpha > 0.0 && alpha < 1.0) {
            return Err(Error::Config(format!("alpha: must satisfy alpha ∈ (0,1), got {alpha}")));
        }
        let threads = match settings.threads {
            Some(t) => t,
            None => match std::env::var(THREADS_ENV) {
                Ok(v) => v
                    .trim()
                    .parse()
                    .map_err(|_| Error::Config(format!("{THREADS_ENV}: expected a positive integer, got '{v}'")))?,
                Err(_) => 1,
            },
        };
        if threads == 0 {
            return Err(Error::Config("threads: must be at least 1".into()));
        }
        if let Some(r) = settings.reps {
            if r == 0 {
                return Err(Error::Config("reps: must be at least 1".into()));
            }
        }
        if let Some(f) = settings.floor {
            if !(f > 0.0) {
                return Err(Error::Config(format!("floor: must be positive, got {f}")));
            }
        }
        if let Some(nv) = &settings.noise_variances {
            if nv.iter().any(|v| !(*v >= 0.0)) {
                return Err(Error::Config("noise_variances: must be non-negative".into()));
            }
        }
        if let Some(case) = settings.case {
            Case::from_number(case)?;
        }
        if let Some(id) = &settings.model_id {
            ModelId::parse(id)?;
        }
        if let Some(t) = &settings.task {
            parse_task(t)?;
        }
        if let Some(s2) = settings.sigma_eps2 {
            if !(s2 >= 0.0) {
                return Err(Error::Config(format!("sigma_eps2: must be non-negative, got {s2}")));
            }
        }
        if let Some(c) = &settings.command {
            if !COMMANDS.contains(&c.as_str()) {
                return Err(Error::Config(format!("command: expected one of {}, got '{c}'", COMMANDS.join(", "))));
            }
        }
        let seed = settings.seed.unwrap_or(DEFAULT_SEED);
        Ok(Self { settings, alpha, seed, threads })
    }

    pub fn model(&self) -> Result<ModelFamily> {
        let name = self.settings.model.as_deref().unwrap_or("linear-1d");
        FamilyRegistry::default().build(name, self.settings.terms)
    }

    /// Noise law for dimension `d`; defaults to variance 0.01 per coordinate.
    pub fn noise(&self, d: usize) -> Result<NoiseSpec> {
        match &self.settings.noise_variances {
            Some(v) if v.len() == d => NoiseSpec::gaussian(v.clone()),
            Some(v) if v.len() == 1 => NoiseSpec::isotropic(d, v[0]),
            Some(v) => Err(Error::Config(format!("noise_variances: expected {d} values, got {}", v.len()))),
            None => NoiseSpec::isotropic(d, 0.01),
        }
    }

    pub fn plan_spec(&self, d: usize) -> Result<PlanSpec> {
        let s = &self.settings;
        let mut spec = if d == 1 { PlanSpec::case1(0.5, 0.5) } else { PlanSpec::case2() };
        if d > 2 {
            spec.region = vec![(-1.0, 1.0); d];
            spec.grid_counts = vec![21; d];
        }
        let rule_name = s.bandwidth.as_deref().unwrap_or(if s.h.is_some() { "explicit" } else if d == 1 { "case1" } else { "case2" });
        spec.rule = match rule_name {
            "case1" => BandwidthRule::Case1 { a: s.a.unwrap_or(0.5), b: s.b.unwrap_or(0.5) },
            "case2" => BandwidthRule::Case2,
            "explicit" => {
                let h = s.h.ok_or_else(|| Error::Config("h: required when bandwidth is explicit".into()))?;
                let w = s.w.unwrap_or(h);
                BandwidthRule::Explicit { h, w }
            }
            other => {
                return Err(Error::Config(format!("bandwidth: expected case1, case2 or explicit, got '{other}'")));
            }
        };
        if let BandwidthRule::Case1 { a, b } | BandwidthRule::Explicit { h: a, w: b } = spec.rule {
            if !(a > 0.0 && b > 0.0) {
                return Err(Error::Config("a, b, h, w: bandwidth constants must be positive".into()));
            }
        }
        if let Some(k) = &s.kernel {
            spec.kernel = KernelKind::parse(k)?;
        }
        if let Some(r) = &s.region {
            if r.len() != 2 * d || r.chunks(2).any(|p| !(p[0] < p[1])) {
                return Err(Error::Config(format!("region: expected {d} lo,hi pairs with lo < hi")));
            }
            spec.region = r.chunks(2).map(|p| (p[0], p[1])).collect();
        }
        if let Some(g) = &s.grid {
            spec.grid_counts = match g.len() {
                1 => vec![g[0]; d],
                len if len == d => g.clone(),
                _ => return Err(Error::Config(format!("grid: expected 1 or {d} counts"))),
            };
            if spec.grid_counts.contains(&0) {
                return Err(Error::Config("grid: node counts must be positive".into()));
            }
        }
        spec.floor = s.floor.unwrap_or(DEFAULT_DENSITY_FLOOR);
        Ok(spec)
    }

    /// The rate-condition warning for `n` observations in dimension `d`, if any.
    pub fn bandwidth_warning(&self, n: usize, d: usize) -> Result<Option<String>> {
        Ok(h3_warning(&self.plan_spec(d)?.rule, n, d))
    }

    pub fn task(&self) -> Result<Task> {
        parse_task(self.settings.task.as_deref().unwrap_or("both"))
    }
}

fn parse_task(s: &str) -> Result<Task> {
    match s {
        "fit" => Ok(Task::Fit),
        "test" => Ok(Task::Test),
        "both" => Ok(Task::Both),
        other => Err(Error::Config(format!("task: expected fit, test or both, got '{other}'"))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimal_test_config_is_valid() {
        let s = Settings::from_json_str(r#"{"command": "test", "model": "linear-1d", "a": 0.5, "b": 0.5, "alpha": 0.05}"#).unwrap();
        let cfg = RunConfig::new(s).unwrap();
        assert_eq!(cfg.alpha, 0.05);
        assert_eq!(cfg.model().unwrap().name(), "linear-1d");
    }

    #[test]
    fn alpha_out_of_range_names_the_constraint() {
        let s = Settings::from_json_str(r#"{"alpha": 1.5}"#).unwrap();
        let err = RunConfig::new(s).unwrap_err().to_string();
        assert!(err.contains("alpha ∈ (0,1)"), "{err}");
    }

    #[test]
    fn unknown_key_is_rejected() {
        let err = Settings::from_json_str(r#"{"alfa": 0.1}"#).unwrap_err().to_string();
        assert!(err.contains("alfa"), "{err}");
    }

    #[test]
    fn flags_override_file() {
        let file = Settings::from_json_str(r#"{"alpha": 0.1, "seed": 3}"#).unwrap();
        let flags = Settings { alpha: Some(0.01), ..Default::default() };
        let merged = file.overlay(&flags);
        assert_eq!(merged.alpha, Some(0.01));
        assert_eq!(merged.seed, Some(3));
    }

    #[test]
    fn slow_bandwidth_warns_but_is_accepted() {
        // h = n^{-0.6} in d = 1 breaks 0 < a < 1/2
        let n = 200usize;
        let h = (n as f64).powf(-0.6);
        let s = Settings { h: Some(h), ..Default::default() };
        let cfg = RunConfig::new(s).unwrap();
        let warning = cfg.bandwidth_warning(n, 1).unwrap().unwrap();
        assert!(warning.contains("rate condition"));
        assert!(cfg.plan_spec(1).unwrap().resolve(n).is_ok());
    }
}
