//! TOML experiment configuration.
//!
//! ```toml
//! loss = { name = "smoothed_huber", k = 1.345 }
//! noise = { name = "gaussian", sd = 1.0 }
//! entry_law = "gaussian"
//! seeds = [0, 1, 2]
//! checks = ["system", "fit_bounds"]
//!
//! [[cells]]
//! n = 400
//! kappa = 0.5
//! tau = 1.0
//! ```
//!
//! A `[grid]` table with lists `n`, `kappa`, `tau` may replace or extend `cells`.

use std::collections::HashSet;
use std::fmt;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::estimator::EntryLaw;
use crate::losses::LossModel;
use crate::noise::NoiseModel;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Check {
    System,
    FitBounds,
    Loo,
    Lop,
    ResidualLaw,
    Variance,
    Ctau,
    TauLimit,
}

impl Check {
    pub const ALL: [Check; 8] = [
        Check::System,
        Check::FitBounds,
        Check::Loo,
        Check::Lop,
        Check::ResidualLaw,
        Check::Variance,
        Check::Ctau,
        Check::TauLimit,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            Check::System => "system",
            Check::FitBounds => "fit_bounds",
            Check::Loo => "loo",
            Check::Lop => "lop",
            Check::ResidualLaw => "residual_law",
            Check::Variance => "variance",
            Check::Ctau => "ctau",
            Check::TauLimit => "tau_limit",
        }
    }

    /// Whether the check needs the full-sample fit of every seed.
    pub fn needs_fit(&self) -> bool {
        !matches!(self, Check::TauLimit)
    }
}

impl fmt::Display for Check {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Cell {
    pub n: usize,
    pub kappa: f64,
    pub tau: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Grid {
    pub n: Vec<usize>,
    pub kappa: Vec<f64>,
    pub tau: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Tolerances {
    /// Relative gap between mean `|beta_hat|` and `r`.
    pub norm_rel: f64,
    /// Relative gap between mean `c_tau` and `c`.
    pub ctau_rel: f64,
    pub ks: f64,
    /// Exactness of the quadratic-loss identities.
    pub quadratic_exact: f64,
    pub trace_identity: f64,
    /// Relative gap of the extrapolated quadratic `r(0)^2` to `kappa var / (1 - kappa)`.
    pub tau_limit_rel: f64,
    /// Minimum `var(smallest n) / var(this n)` across cells sharing `(kappa, tau)`.
    pub variance_ratio_min: Option<f64>,
    /// Relative gap of the sample second-moment identity.
    pub second_moment_rel: f64,
}

impl Default for Tolerances {
    fn default() -> Self {
        Tolerances {
            norm_rel: 0.05,
            ctau_rel: 0.05,
            ks: 0.04,
            quadratic_exact: 1e-8,
            trace_identity: 1e-10,
            tau_limit_rel: 0.02,
            variance_ratio_min: None,
            second_moment_rel: 0.05,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Settings {
    /// Leave-one-out indices per fit.
    pub loo_count: usize,
    pub loo_all: bool,
    /// Start leave-one-out refits at the full fit.
    pub warm_start: bool,
    /// Random probes for the optimality-transfer bound.
    pub transfer_probes: usize,
    /// Decreasing grid for the asymptotic `tau -> 0` extrapolation.
    pub tau_grid: Vec<f64>,
    /// Grid for the finite-sample distance to the unpenalized fit.
    pub tau_fit_grid: Vec<f64>,
}

impl Default for Settings {
    fn default() -> Self {
        Settings {
            loo_count: 25,
            loo_all: false,
            warm_start: true,
            transfer_probes: 5,
            tau_grid: vec![1.0, 0.5, 0.1, 0.05, 0.01, 0.005, 0.001],
            tau_fit_grid: vec![1.0, 0.1, 0.01],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Output {
    pub dir: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub loss: LossModel,
    pub noise: NoiseModel,
    #[serde(default = "default_entry_law")]
    pub entry_law: EntryLaw,
    pub seeds: Vec<u64>,
    pub checks: Vec<Check>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub cells: Vec<Cell>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub grid: Option<Grid>,
    #[serde(default)]
    pub tolerances: Tolerances,
    #[serde(default)]
    pub settings: Settings,
    #[serde(default)]
    pub output: Output,
}

fn default_entry_law() -> EntryLaw {
    EntryLaw::Gaussian
}

/// A validated cell with its predictor count.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ResolvedCell {
    pub index: usize,
    pub n: usize,
    pub p: usize,
    pub kappa: f64,
    pub tau: f64,
}

impl ExperimentConfig {
    pub fn parse(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| {
            let path = e
                .span()
                .map_or_else(|| "<config>".to_string(), |s| locate(text, s.start));
            Error::config(path, e.message().to_string())
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::parse(&text).map_err(|e| match e {
            Error::Config { path: field, message } => Error::config(format!("{}:{field}", path.display()), message),
            other => other,
        })
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::config("<config>", e.to_string()))
    }

    /// Short content hash of the canonical JSON form.
    pub fn hash(&self) -> String {
        let canonical = serde_json::to_string(self).expect("config serializes");
        let digest = Sha256::digest(canonical.as_bytes());
        digest.iter().take(8).map(|b| format!("{b:02x}")).collect()
    }

    /// Explicit cells followed by the grid product, in `n`, `kappa`, `tau` order.
    pub fn all_cells(&self) -> Vec<Cell> {
        let mut cells = self.cells.clone();
        if let Some(g) = &self.grid {
            for &n in &g.n {
                for &kappa in &g.kappa {
                    for &tau in &g.tau {
                        cells.push(Cell { n, kappa, tau });
                    }
                }
            }
        }
        cells
    }

    pub fn has(&self, check: Check) -> bool {
        self.checks.contains(&check)
    }

    pub fn validate(&self) -> Result<Vec<ResolvedCell>> {
        self.loss.validate().map_err(|e| Error::config("loss", e.to_string()))?;
        self.noise
            .validate()
            .map_err(|e| Error::config("noise", e.to_string()))?;
        if self.seeds.is_empty() {
            return Err(Error::config("seeds", "at least one seed is required"));
        }
        let mut seen = HashSet::new();
        if let Some(dup) = self.seeds.iter().find(|s| !seen.insert(**s)) {
            return Err(Error::config("seeds", format!("seed {dup} is repeated")));
        }
        if self.checks.is_empty() {
            return Err(Error::config("checks", "no checks requested"));
        }
        if self.has(Check::Variance) && self.seeds.len() < crate::diagnostics::sweep::MIN_SWEEP_SEEDS {
            return Err(Error::config(
                "seeds",
                format!(
                    "the variance check needs at least {} seeds",
                    crate::diagnostics::sweep::MIN_SWEEP_SEEDS
                ),
            ));
        }
        if self.has(Check::TauLimit) {
            if self.loss.strong_convexity() <= 0.0 {
                return Err(Error::config("loss", "tau_limit needs a strongly convex loss"));
            }
            let g = &self.settings.tau_grid;
            if g.is_empty() || g.windows(2).any(|w| !(w[1] < w[0])) || g.iter().any(|t| !(*t > 0.0)) {
                return Err(Error::config(
                    "settings.tau_grid",
                    "must be positive and strictly decreasing",
                ));
            }
            if self.settings.tau_fit_grid.iter().any(|t| !(*t > 0.0)) {
                return Err(Error::config("settings.tau_fit_grid", "must be positive"));
            }
        }
        let cells = self.all_cells();
        if cells.is_empty() {
            return Err(Error::config("cells", "no cells and no grid"));
        }
        let section = |i: usize| {
            if i < self.cells.len() {
                format!("cells[{i}]")
            } else {
                format!("grid[{}]", i - self.cells.len())
            }
        };
        cells
            .iter()
            .enumerate()
            .map(|(index, c)| {
                if c.n == 0 {
                    return Err(Error::config(format!("{}.n", section(index)), "n must be >= 1"));
                }
                if !(c.kappa.is_finite() && c.kappa > 0.0) {
                    return Err(Error::config(format!("{}.kappa", section(index)), "kappa must be > 0"));
                }
                let p = (c.kappa * c.n as f64).round() as usize;
                if p == 0 {
                    return Err(Error::config(
                        format!("{}.kappa", section(index)),
                        format!("p = round({} * {}) = 0", c.kappa, c.n),
                    ));
                }
                if !(c.tau.is_finite() && c.tau > 0.0) {
                    return Err(Error::config(format!("{}.tau", section(index)), "tau must be > 0"));
                }
                if self.has(Check::Lop) && p < 2 {
                    return Err(Error::config(format!("{}.kappa", section(index)), "lop needs p >= 2"));
                }
                if self.has(Check::TauLimit) && !(c.kappa < 1.0 && p < c.n) {
                    return Err(Error::config(
                        format!("{}.kappa", section(index)),
                        "tau_limit needs p < n",
                    ));
                }
                Ok(ResolvedCell {
                    index,
                    n: c.n,
                    p,
                    kappa: c.kappa,
                    tau: c.tau,
                })
            })
            .collect()
    }
}

/// `line:column` of a byte offset.
fn locate(text: &str, offset: usize) -> String {
    let before = &text[..offset.min(text.len())];
    let line = before.matches('\n').count() + 1;
    let col = before.rfind('\n').map_or(before.len(), |i| before.len() - i - 1) + 1;
    format!("line {line}, column {col}")
}
