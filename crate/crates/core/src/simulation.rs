//! Monte Carlo designs with VAR(1) predictors, replicated selection studies
//! and their summary metrics.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize, Serializer};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::error::{QpcError, Result};
use crate::kernels::Dataset;
use crate::quantreg::{check_loss, QrFit, QuantileLevel};
use crate::report::format_sig;
use crate::screening::{l1_select, screen, Algorithm, ScreenConfig};

/// Number of truly relevant predictors in both designs (the first four).
pub const N_RELEVANT: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Family {
    /// Equicorrelated innovations with the fourth predictor masked
    /// marginally; slopes `beta, beta, beta, -3 sqrt(rho) beta`.
    A,
    /// Toeplitz innovations `rho^|i-j|`; unit slopes on the first four.
    B,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DgpSpec {
    pub family: Family,
    pub n: usize,
    pub p: usize,
    pub rho: f64,
    pub phi: f64,
    pub tau: QuantileLevel,
    pub sigma: f64,
    pub burn_in: usize,
    pub holdout: usize,
    pub seed: u64,
}

impl DgpSpec {
    /// Spec with unit noise scale, 200 burn-in periods and 10 holdout rows.
    pub fn new(family: Family, n: usize, p: usize, rho: f64, phi: f64, tau: QuantileLevel, seed: u64) -> Self {
        Self {
            family,
            n,
            p,
            rho,
            phi,
            tau,
            sigma: 1.0,
            burn_in: 200,
            holdout: 10,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(QpcError::InvalidArgument(m));
        if !(self.phi.abs() < 1.0) {
            return bad(format!("phi = {} must satisfy |phi| < 1", self.phi));
        }
        if !(0.0..1.0).contains(&self.rho) {
            return bad(format!("rho = {} must lie in [0, 1)", self.rho));
        }
        if !(self.sigma > 0.0) || !self.sigma.is_finite() {
            return bad(format!("sigma = {} must be positive", self.sigma));
        }
        let min_p = match self.family {
            Family::A => 5,
            Family::B => N_RELEVANT,
        };
        if self.p < min_p {
            return bad(format!("family {:?} needs p >= {min_p}", self.family));
        }
        if self.n < 2 {
            return bad("n must be at least 2".into());
        }
        Ok(())
    }

    /// Slope vector (without intercept).
    pub fn beta(&self) -> Vec<f64> {
        let mut b = vec![0.0; self.p];
        match self.family {
            Family::A => {
                let s = 2.5 * (1.0 + (self.tau.value() - 0.5).abs());
                b[..3].fill(s);
                b[3] = -3.0 * self.rho.sqrt() * s;
            }
            Family::B => b[..N_RELEVANT].fill(1.0),
        }
        b
    }

    /// Innovation covariance, row-major `p x p`.
    pub fn innovation_cov(&self) -> Vec<f64> {
        let p = self.p;
        let mut s = vec![0.0; p * p];
        let shrink = 1.0 - self.phi * self.phi;
        for i in 0..p {
            for j in 0..p {
                s[i * p + j] = match self.family {
                    Family::A if i == j => 1.0,
                    Family::A if i == 3 || j == 3 => self.rho.sqrt() * shrink,
                    Family::A => self.rho * shrink,
                    Family::B => self.rho.powi(i.abs_diff(j) as i32),
                };
            }
        }
        s
    }
}

/// Lower Cholesky factor (row-major), or `None` if not positive definite.
fn cholesky_lower(a: &[f64], k: usize) -> Option<Vec<f64>> {
    let mut l = vec![0.0; k * k];
    for i in 0..k {
        for j in 0..=i {
            let s: f64 = a[i * k + j] - (0..j).map(|m| l[i * k + m] * l[j * k + m]).sum::<f64>();
            if i == j {
                if !(s > 1e-12) {
                    return None;
                }
                l[i * k + i] = s.sqrt();
            } else {
                l[i * k + j] = s / l[j * k + j];
            }
        }
    }
    Some(l)
}

/// Training sample plus the rows that immediately follow it.
#[derive(Debug, Clone, PartialEq)]
pub struct Simulated {
    pub train: Dataset,
    /// Holdout predictor rows (each of length p).
    pub holdout_x: Vec<Vec<f64>>,
    pub holdout_y: Vec<f64>,
}

/// Reusable sampler for one spec: the innovation factor is computed once.
pub struct Generator {
    spec: DgpSpec,
    chol: Vec<f64>,
    beta: Vec<f64>,
    shift: f64,
}

impl Generator {
    pub fn new(spec: &DgpSpec) -> Result<Self> {
        spec.validate()?;
        let chol = cholesky_lower(&spec.innovation_cov(), spec.p).ok_or(QpcError::CovarianceNotPD)?;
        Ok(Self {
            spec: *spec,
            chol,
            beta: spec.beta(),
            shift: spec.sigma * std_normal_quantile(spec.tau.value()),
        })
    }

    fn rng(&self, replication: u64) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.spec.seed);
        rng.set_stream(replication);
        rng
    }

    /// Draws replication `replication`; the same pair always gives the same
    /// sample.
    pub fn draw(&self, replication: u64) -> Simulated {
        let DgpSpec {
            n, p, burn_in, holdout, phi, sigma, ..
        } = self.spec;
        let mut rng = self.rng(replication);
        let total = burn_in + n + holdout;
        let mut x = vec![0.0; p];
        let mut z = vec![0.0; p];
        let mut cols: Vec<Vec<f64>> = vec![Vec::with_capacity(n); p];
        let mut y = Vec::with_capacity(n);
        let mut holdout_x = Vec::with_capacity(holdout);
        let mut holdout_y = Vec::with_capacity(holdout);
        for t in 0..total {
            z.iter_mut().for_each(|v| *v = rng.sample(StandardNormal));
            for i in 0..p {
                let row = &self.chol[i * p..i * p + i + 1];
                let eta: f64 = row.iter().zip(&z[..=i]).map(|(a, b)| a * b).sum();
                x[i] = phi * x[i] + eta;
            }
            let noise: f64 = sigma * rng.sample::<f64, _>(StandardNormal) - self.shift;
            if t < burn_in {
                continue;
            }
            let yt = self.beta[..N_RELEVANT]
                .iter()
                .zip(&x)
                .map(|(b, v)| b * v)
                .sum::<f64>()
                + noise;
            if t < burn_in + n {
                for (c, v) in cols.iter_mut().zip(&x) {
                    c.push(*v);
                }
                y.push(yt);
            } else {
                holdout_x.push(x.clone());
                holdout_y.push(yt);
            }
        }
        Simulated {
            train: Dataset::unnamed(y, cols).expect("simulated panel is well formed"),
            holdout_x,
            holdout_y,
        }
    }
}

fn std_normal_quantile(tau: f64) -> f64 {
    Normal::new(0.0, 1.0).expect("unit normal").inverse_cdf(tau)
}

pub fn gen_dgp_a(spec: &DgpSpec) -> Result<Simulated> {
    if spec.family != Family::A {
        return Err(QpcError::InvalidArgument("spec is not family A".into()));
    }
    Ok(Generator::new(spec)?.draw(0))
}

pub fn gen_dgp_b(spec: &DgpSpec) -> Result<Simulated> {
    if spec.family != Family::B {
        return Err(QpcError::InvalidArgument("spec is not family B".into()));
    }
    Ok(Generator::new(spec)?.draw(0))
}

/// `count` draws of the regression error `sigma z - sigma Phi^{-1}(tau)`.
pub fn draw_errors(tau: QuantileLevel, sigma: f64, count: usize, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let shift = sigma * std_normal_quantile(tau.value());
    (0..count)
        .map(|_| sigma * rng.sample::<f64, _>(StandardNormal) - shift)
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Method {
    #[serde(rename = "QPCS")]
    Qpcs,
    #[serde(rename = "QPCFR")]
    Qpcfr,
    #[serde(rename = "L1QR")]
    L1qr,
}

impl Method {
    pub const ALL: [Method; 3] = [Method::Qpcs, Method::Qpcfr, Method::L1qr];

    pub fn label(self) -> &'static str {
        match self {
            Method::Qpcs => "QPCS",
            Method::Qpcfr => "QPCFR",
            Method::L1qr => "L1QR",
        }
    }

    pub fn is_stepwise(self) -> bool {
        self != Method::L1qr
    }
}

impl std::str::FromStr for Method {
    type Err = QpcError;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_uppercase().as_str() {
            "QPCS" => Ok(Method::Qpcs),
            "QPCFR" => Ok(Method::Qpcfr),
            "L1QR" | "L1-QR" | "L1" => Ok(Method::L1qr),
            _ => Err(QpcError::InvalidArgument(format!("unknown method {s:?}"))),
        }
    }
}

/// Selection settings shared by every method in a study.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MethodSettings {
    /// Penalty grid size for the l1 path.
    pub lambda_grid: usize,
}

impl Default for MethodSettings {
    fn default() -> Self {
        Self { lambda_grid: 30 }
    }
}

/// A method's final selection (indices in the order the method ranks them)
/// and the fit it predicts with.
#[derive(Debug, Clone, PartialEq)]
pub struct Selection {
    pub selected: Vec<usize>,
    pub fit: QrFit,
}

/// Runs one method on one training sample with default tuning for its size.
pub fn select(method: Method, ds: &Dataset, tau: QuantileLevel, settings: &MethodSettings) -> Result<Selection> {
    match method {
        Method::Qpcs | Method::Qpcfr => {
            let alg = if method == Method::Qpcs {
                Algorithm::Qpcs
            } else {
                Algorithm::Qpcfr
            };
            let cfg = ScreenConfig::new(ds.n(), ds.p(), tau, alg);
            let trace = screen(ds, &cfg)?;
            Ok(Selection {
                selected: trace.chosen(),
                fit: trace.final_fit,
            })
        }
        Method::L1qr => {
            let cfg = ScreenConfig::new(ds.n(), ds.p(), tau, Algorithm::Qpcfr);
            let sel = l1_select(ds, tau, cfg.d_max, settings.lambda_grid)?;
            Ok(Selection {
                selected: sel.selected,
                fit: sel.fit,
            })
        }
    }
}

/// Prediction of `fit` (over columns `selected`) for a full predictor row.
pub fn predict(fit: &QrFit, selected: &[usize], row: &[f64]) -> f64 {
    fit.beta[0]
        + selected
            .iter()
            .zip(&fit.beta[1..])
            .map(|(&j, b)| b * row[j])
            .sum::<f64>()
}

impl Selection {
    /// Prediction for a full predictor row. The l1 fit carries one slope per
    /// column, so it uses the whole row; stepwise fits use `selected` only.
    pub fn predict_row(&self, method: Method, row: &[f64]) -> f64 {
        match method {
            Method::L1qr => self.fit.predict(row),
            _ => predict(&self.fit, &self.selected, row),
        }
    }
}

fn holdout_loss(method: Method, sel: &Selection, sim: &Simulated, tau: f64) -> f64 {
    let m = sim.holdout_y.len();
    let total: f64 = sim
        .holdout_x
        .iter()
        .zip(&sim.holdout_y)
        .map(|(row, &yv)| check_loss(yv - sel.predict_row(method, row), tau))
        .sum();
    total / m as f64
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplicationRecord {
    pub replication: usize,
    /// Selected column names, in selection order.
    pub selected: Vec<String>,
    pub mqe: f64,
    pub tp: usize,
    pub fp: usize,
    pub exact: bool,
    /// 1-based position of each relevant predictor in the selection, if present.
    pub ranks: [Option<usize>; N_RELEVANT],
    pub error: Option<String>,
}

/// Average selection rank of one relevant predictor.
#[derive(Debug, Clone, Copy, PartialEq, Deserialize)]
pub enum RankStat {
    Mean(f64),
    /// Missed in at least one replication.
    Missing,
    /// The method does not produce an ordering.
    NotApplicable,
}

impl RankStat {
    pub fn render(&self) -> String {
        match self {
            RankStat::Mean(v) => format_sig(*v),
            RankStat::Missing => "NA".into(),
            RankStat::NotApplicable => "-".into(),
        }
    }
}

impl Serialize for RankStat {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        match self {
            RankStat::Mean(v) => s.serialize_f64(*v),
            other => s.serialize_str(&other.render()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SimulationReport {
    pub method: Method,
    pub spec: DgpSpec,
    pub replications: usize,
    /// Replications where the method failed; they are left out of every average.
    pub failed: usize,
    pub mqe: f64,
    #[serde(rename = "crate")]
    pub crate_count: usize,
    pub tp: f64,
    pub fp: f64,
    pub ranks: [RankStat; N_RELEVANT],
    pub records: Vec<ReplicationRecord>,
}

impl SimulationReport {
    fn from_records(method: Method, spec: &DgpSpec, records: Vec<ReplicationRecord>) -> Self {
        let ok: Vec<&ReplicationRecord> = records.iter().filter(|r| r.error.is_none()).collect();
        let k = ok.len().max(1) as f64;
        let mean = |f: &dyn Fn(&ReplicationRecord) -> f64| {
            if ok.is_empty() {
                f64::NAN
            } else {
                ok.iter().map(|r| f(r)).sum::<f64>() / k
            }
        };
        let ranks = std::array::from_fn(|i| {
            if !method.is_stepwise() {
                RankStat::NotApplicable
            } else if ok.is_empty() || ok.iter().any(|r| r.ranks[i].is_none()) {
                RankStat::Missing
            } else {
                RankStat::Mean(mean(&|r| r.ranks[i].unwrap_or(0) as f64))
            }
        });
        Self {
            method,
            spec: *spec,
            replications: records.len(),
            failed: records.len() - ok.len(),
            mqe: mean(&|r| r.mqe),
            crate_count: ok.iter().filter(|r| r.exact).count(),
            tp: mean(&|r| r.tp as f64),
            fp: mean(&|r| r.fp as f64),
            ranks,
            records,
        }
    }
}

fn record_for(method: Method, rep: usize, sim: &Simulated, tau: QuantileLevel, settings: &MethodSettings) -> ReplicationRecord {
    match select(method, &sim.train, tau, settings) {
        Ok(sel) => {
            let tp = sel.selected.iter().filter(|&&j| j < N_RELEVANT).count();
            let fp = sel.selected.len() - tp;
            let ranks = std::array::from_fn(|i| {
                if method.is_stepwise() {
                    sel.selected.iter().position(|&j| j == i).map(|p| p + 1)
                } else {
                    None
                }
            });
            ReplicationRecord {
                replication: rep,
                selected: sel.selected.iter().map(|&j| sim.train.name(j).to_string()).collect(),
                mqe: holdout_loss(method, &sel, sim, tau.value()),
                tp,
                fp,
                exact: tp == N_RELEVANT && fp == 0,
                ranks,
                error: None,
            }
        }
        Err(e) => ReplicationRecord {
            replication: rep,
            selected: Vec::new(),
            mqe: f64::NAN,
            tp: 0,
            fp: 0,
            exact: false,
            ranks: [None; N_RELEVANT],
            error: Some(e.to_string()),
        },
    }
}

/// Replicated study: every method sees the same simulated samples. Results
/// do not depend on how many worker threads run the replications.
pub fn run_study(
    spec: &DgpSpec,
    methods: &[Method],
    replications: usize,
    settings: &MethodSettings,
) -> Result<Vec<SimulationReport>> {
    if replications == 0 {
        return Err(QpcError::InvalidArgument("need at least one replication".into()));
    }
    let generator = Generator::new(spec)?;
    let per_rep: Vec<Vec<ReplicationRecord>> = (0..replications)
        .into_par_iter()
        .map(|rep| {
            let sim = generator.draw(rep as u64);
            methods
                .iter()
                .map(|&m| record_for(m, rep, &sim, spec.tau, settings))
                .collect()
        })
        .collect();
    Ok(methods
        .iter()
        .enumerate()
        .map(|(k, &m)| {
            let records = per_rep.iter().map(|r| r[k].clone()).collect();
            SimulationReport::from_records(m, spec, records)
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BenchRow {
    pub method: Method,
    pub replications: usize,
    pub failed: usize,
    pub avg_seconds: f64,
}

/// Average wall-clock seconds per replication for each method, on the same
/// simulated samples. Replications run one after another so that timings
/// are not distorted by sharing cores.
pub fn bench_runtime(
    spec: &DgpSpec,
    methods: &[Method],
    replications: usize,
    settings: &MethodSettings,
) -> Result<Vec<BenchRow>> {
    if replications == 0 {
        return Err(QpcError::InvalidArgument("need at least one replication".into()));
    }
    let generator = Generator::new(spec)?;
    let mut totals = vec![0.0; methods.len()];
    let mut failed = vec![0; methods.len()];
    for rep in 0..replications {
        let sim = generator.draw(rep as u64);
        for (k, &m) in methods.iter().enumerate() {
            let start = Instant::now();
            let r = select(m, &sim.train, spec.tau, settings);
            totals[k] += start.elapsed().as_secs_f64();
            if r.is_err() {
                failed[k] += 1;
            }
        }
    }
    Ok(methods
        .iter()
        .enumerate()
        .map(|(k, &m)| BenchRow {
            method: m,
            replications,
            failed: failed[k],
            avg_seconds: totals[k] / replications as f64,
        })
        .collect())
}
