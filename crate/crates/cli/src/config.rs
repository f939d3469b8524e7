//! TOML run configurations. Every table rejects unknown keys; presets supply
//! a base table that a config file may override key by key.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use serde::de::DeserializeOwned;
use serde::Deserialize;

use qpc_core::macro_app::{DateFilter, Quarter};
use qpc_core::simulation::{DgpSpec, Family, Method, MethodSettings};
use qpc_core::screening::{Algorithm, ConfoundingMode, ScreenConfig};
use qpc_core::QuantileLevel;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Format {
    Csv,
    Json,
}

fn default_methods() -> Vec<String> {
    Method::ALL.iter().map(|m| m.label().to_string()).collect()
}

fn default_grid() -> usize {
    MethodSettings::default().lambda_grid
}

pub fn parse_methods(names: &[String]) -> anyhow::Result<Vec<Method>> {
    if names.is_empty() {
        bail!("at least one method is required");
    }
    let mut out: Vec<Method> = Vec::new();
    for n in names {
        let m: Method = n.parse()?;
        if out.contains(&m) {
            bail!("method {} listed twice", m.label());
        }
        out.push(m);
    }
    Ok(out)
}

fn quantile(tau: f64) -> anyhow::Result<QuantileLevel> {
    QuantileLevel::new(tau).map_err(Into::into)
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimulateConfig {
    #[serde(default = "default_families")]
    pub families: Vec<Family>,
    pub n: usize,
    pub p: usize,
    pub taus: Vec<f64>,
    pub phis: Vec<f64>,
    pub rhos: Vec<f64>,
    #[serde(default = "one")]
    pub sigma: f64,
    #[serde(default = "default_burn_in")]
    pub burn_in: usize,
    #[serde(default = "default_holdout")]
    pub holdout: usize,
    pub replications: usize,
    #[serde(default = "default_methods")]
    pub methods: Vec<String>,
    #[serde(default = "default_grid")]
    pub lambda_grid: usize,
    pub seed: Option<u64>,
    pub format: Option<Format>,
    pub out: Option<PathBuf>,
}

fn default_families() -> Vec<Family> {
    vec![Family::A]
}

fn one() -> f64 {
    1.0
}

fn default_burn_in() -> usize {
    200
}

fn default_holdout() -> usize {
    10
}

impl SimulateConfig {
    /// Every grid cell, in family, rho, phi, tau order.
    pub fn cells(&self, seed: u64) -> anyhow::Result<Vec<DgpSpec>> {
        if self.families.is_empty() || self.taus.is_empty() || self.phis.is_empty() || self.rhos.is_empty() {
            bail!("families, taus, phis and rhos must all be non-empty");
        }
        if self.replications == 0 {
            bail!("replications must be at least 1");
        }
        let mut out = Vec::new();
        for &family in &self.families {
            for &rho in &self.rhos {
                for &phi in &self.phis {
                    for &tau in &self.taus {
                        let spec = DgpSpec {
                            sigma: self.sigma,
                            burn_in: self.burn_in,
                            holdout: self.holdout,
                            ..DgpSpec::new(family, self.n, self.p, rho, phi, quantile(tau)?, seed)
                        };
                        spec.validate()?;
                        if spec.holdout == 0 {
                            bail!("holdout must be at least 1");
                        }
                        out.push(spec);
                    }
                }
            }
        }
        Ok(out)
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BenchConfig {
    #[serde(default = "family_a")]
    pub family: Family,
    pub n: usize,
    pub p: usize,
    pub rho: f64,
    pub phi: f64,
    pub tau: f64,
    #[serde(default = "one")]
    pub sigma: f64,
    pub replications: usize,
    #[serde(default = "default_methods")]
    pub methods: Vec<String>,
    #[serde(default = "default_grid")]
    pub lambda_grid: usize,
    pub seed: Option<u64>,
    pub format: Option<Format>,
    pub out: Option<PathBuf>,
}

fn family_a() -> Family {
    Family::A
}

impl BenchConfig {
    pub fn spec(&self, seed: u64) -> anyhow::Result<DgpSpec> {
        if self.replications == 0 {
            bail!("replications must be at least 1");
        }
        let spec = DgpSpec {
            sigma: self.sigma,
            ..DgpSpec::new(self.family, self.n, self.p, self.rho, self.phi, quantile(self.tau)?, seed)
        };
        spec.validate()?;
        Ok(spec)
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScreenFileConfig {
    pub input: PathBuf,
    /// Response column; the first column when absent.
    pub response: Option<String>,
    pub tau: f64,
    pub algorithm: String,
    pub d_star: Option<usize>,
    /// Confounder cap (ignored by QPCFR).
    pub m: Option<usize>,
    pub d_max: Option<usize>,
    #[serde(default)]
    pub confounding: ConfoundingMode,
    #[serde(default)]
    pub standardize: bool,
    pub format: Option<Format>,
    pub out: Option<PathBuf>,
}

impl ScreenFileConfig {
    pub fn screen_config(&self, n: usize, p: usize) -> anyhow::Result<ScreenConfig> {
        let algorithm = match self.algorithm.to_ascii_uppercase().as_str() {
            "QPCS" => Algorithm::Qpcs,
            "QPCFR" => Algorithm::Qpcfr,
            other => bail!("unknown algorithm {other:?} (expected QPCS or QPCFR)"),
        };
        let mut cfg = ScreenConfig::new(n, p, quantile(self.tau)?, algorithm);
        if let Some(d) = self.d_max {
            cfg.d_max = d;
        }
        cfg.d_star = self.d_star.unwrap_or(cfg.d_star.min(cfg.d_max));
        if let Some(m) = self.m {
            cfg.m_cap = m;
        }
        cfg.confounding = self.confounding;
        cfg.standardize = self.standardize;
        cfg.validate(n)?;
        Ok(cfg)
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NamedFilter {
    pub name: String,
    pub start: Quarter,
    pub end: Quarter,
}

impl NamedFilter {
    pub fn range(&self) -> DateFilter {
        DateFilter {
            start: self.start,
            end: self.end,
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ForecastConfig {
    pub panel: PathBuf,
    pub target: String,
    pub tau: f64,
    pub windows: Vec<usize>,
    #[serde(default = "default_methods")]
    pub methods: Vec<String>,
    pub top_k: Option<usize>,
    #[serde(default)]
    pub standardize: bool,
    #[serde(default = "default_grid")]
    pub lambda_grid: usize,
    /// Series whose selection counts are reported separately.
    #[serde(default)]
    pub inclusion: Vec<String>,
    #[serde(default)]
    pub filters: Vec<NamedFilter>,
    pub format: Option<Format>,
    pub out: Option<PathBuf>,
}

impl ForecastConfig {
    pub fn validate(&self) -> anyhow::Result<()> {
        quantile(self.tau)?;
        if self.windows.is_empty() {
            bail!("windows must list at least one window length");
        }
        parse_methods(&self.methods)?;
        for f in &self.filters {
            if f.start > f.end {
                bail!("filter {} starts after it ends", f.name);
            }
            if f.name.is_empty() || f.name == "all" || !f.name.chars().all(|c| c.is_ascii_alphanumeric() || c == '_' || c == '-') {
                bail!("filter name {:?} must be non-empty, not \"all\", and use only letters, digits, '_' or '-'", f.name);
            }
        }
        Ok(())
    }
}

pub const PRESETS: [(&str, &str); 4] = [
    (
        "table1",
        "families = [\"A\"]\nn = 200\np = 1000\ntaus = [0.2, 0.5, 0.8]\nphis = [0.2, 0.5, 0.8]\nrhos = [0.5]\nreplications = 50\n",
    ),
    (
        "table4",
        "families = [\"A\"]\nn = 200\np = 1000\ntaus = [0.2, 0.5, 0.8]\nphis = [0.2, 0.5, 0.8]\nrhos = [0.95]\nreplications = 50\n",
    ),
    (
        "table7",
        "families = [\"B\"]\nn = 200\np = 1000\ntaus = [0.2, 0.5, 0.8]\nphis = [0.2, 0.5, 0.8]\nrhos = [0.5]\nreplications = 50\n",
    ),
    (
        "table10",
        "family = \"A\"\nn = 100\np = 500\nrho = 0.5\nphi = 0.2\ntau = 0.5\nreplications = 100\n",
    ),
];

/// Parses `preset` (if any) and overlays the config file's keys on top.
pub fn load<T: DeserializeOwned>(path: Option<&Path>, preset: Option<&str>) -> anyhow::Result<T> {
    let mut table = toml::Table::new();
    if let Some(name) = preset {
        let (_, text) = PRESETS
            .iter()
            .find(|(n, _)| *n == name)
            .with_context(|| format!("unknown preset {name:?}"))?;
        table = text.parse::<toml::Table>().expect("preset parses");
    }
    if let Some(path) = path {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        let file: toml::Table = text.parse().with_context(|| format!("parsing {}", path.display()))?;
        table.extend(file);
    }
    if path.is_none() && preset.is_none() {
        bail!("either --config or --preset is required");
    }
    T::deserialize(table).context("invalid configuration")
}
