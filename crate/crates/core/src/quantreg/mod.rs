//! Check-loss machinery and exact solvers for linear quantile regression,
//! with and without an l1 penalty on the slopes.
//!
//! Fits always carry an unpenalized intercept as the first coefficient.

mod ipm;
mod polish;

use serde::{Deserialize, Serialize};

use crate::error::{QpcError, Result};
use crate::kernels::{axpy, Projector};

pub(crate) use ipm::NormalSolve;

/// Quantile level strictly inside (0, 1).
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd, Serialize, Deserialize)]
#[serde(try_from = "f64", into = "f64")]
pub struct QuantileLevel(f64);

impl QuantileLevel {
    pub fn new(tau: f64) -> Result<Self> {
        if tau > 0.0 && tau < 1.0 {
            Ok(Self(tau))
        } else {
            Err(QpcError::InvalidArgument(format!("quantile level {tau} not in (0, 1)")))
        }
    }

    pub fn value(self) -> f64 {
        self.0
    }
}

impl TryFrom<f64> for QuantileLevel {
    type Error = QpcError;
    fn try_from(v: f64) -> Result<Self> {
        Self::new(v)
    }
}

impl From<QuantileLevel> for f64 {
    fn from(t: QuantileLevel) -> f64 {
        t.0
    }
}

/// `rho_tau(u) = u (tau - 1{u < 0})`.
#[inline]
pub fn check_loss(u: f64, tau: f64) -> f64 {
    if u < 0.0 {
        u * (tau - 1.0)
    } else {
        u * tau
    }
}

/// `psi_tau(u) = tau - 1{u < 0}`; note `psi(0) = tau`.
#[inline]
pub fn psi(u: f64, tau: f64) -> f64 {
    if u < 0.0 {
        tau - 1.0
    } else {
        tau
    }
}

pub fn mean_check_loss(residuals: &[f64], tau: f64) -> f64 {
    residuals.iter().map(|&r| check_loss(r, tau)).sum::<f64>() / residuals.len() as f64
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QrFit {
    /// Intercept first, then one slope per design column.
    pub beta: Vec<f64>,
    pub residuals: Vec<f64>,
    /// Mean check loss, plus `lambda * sum |slope|` for penalized fits.
    pub objective: f64,
    pub iterations: usize,
    pub converged: bool,
}

impl QrFit {
    pub fn slopes(&self) -> &[f64] {
        &self.beta[1..]
    }

    pub fn mean_check_loss(&self, tau: f64) -> f64 {
        mean_check_loss(&self.residuals, tau)
    }

    pub fn predict(&self, row: &[f64]) -> f64 {
        self.beta[0] + self.beta[1..].iter().zip(row).map(|(b, x)| b * x).sum::<f64>()
    }

    /// Indices of slopes with magnitude above `ACTIVE_TOL`.
    pub fn active_set(&self) -> Vec<usize> {
        self.slopes()
            .iter()
            .enumerate()
            .filter(|(_, b)| b.abs() > ACTIVE_TOL)
            .map(|(k, _)| k)
            .collect()
    }
}

/// Residuals this small relative to the response are treated as exact zeros.
pub const ZERO_RESIDUAL: f64 = 1e-10;

/// Slopes at or below this magnitude count as zero when sizing an active set.
pub const ACTIVE_TOL: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SolverOptions {
    /// Relative duality-gap tolerance.
    pub tol: f64,
    pub max_iter: usize,
}

impl Default for SolverOptions {
    fn default() -> Self {
        Self {
            tol: 1e-9,
            max_iter: 200,
        }
    }
}

fn residuals_of(y: &[f64], cols: &[&[f64]], beta: &[f64]) -> Vec<f64> {
    let mut r: Vec<f64> = y.iter().map(|v| v - beta[0]).collect();
    for (j, col) in cols.iter().enumerate() {
        axpy(-beta[j + 1], col, &mut r);
    }
    r
}

fn check_shapes(y: &[f64], cols: &[&[f64]]) -> Result<()> {
    if y.is_empty() {
        return Err(QpcError::InvalidArgument("empty response".into()));
    }
    if cols.iter().any(|c| c.len() != y.len()) {
        return Err(QpcError::InvalidArgument("column length does not match response".into()));
    }
    if y.iter().chain(cols.iter().flat_map(|c| c.iter())).any(|v| !v.is_finite()) {
        return Err(QpcError::InvalidArgument("non-finite input".into()));
    }
    Ok(())
}

/// Lower (type-1) empirical quantile: the `ceil(n tau)`-th order statistic.
pub fn empirical_quantile(y: &[f64], tau: f64) -> f64 {
    let mut sorted = y.to_vec();
    sorted.sort_by(|a, b| a.total_cmp(b));
    let n = sorted.len();
    let rank = ((n as f64 * tau).ceil() as usize).clamp(1, n);
    sorted[rank - 1]
}

fn intercept_only(y: &[f64], tau: f64) -> QrFit {
    let q = empirical_quantile(y, tau);
    let residuals: Vec<f64> = y.iter().map(|v| v - q).collect();
    let objective = mean_check_loss(&residuals, tau);
    QrFit {
        beta: vec![q],
        residuals,
        objective,
        iterations: 0,
        converged: true,
    }
}

/// Unpenalized quantile regression of `y` on an intercept plus `cols`.
pub fn qr_fit(y: &[f64], cols: &[&[f64]], tau: QuantileLevel) -> Result<QrFit> {
    qr_fit_with(y, cols, tau, &SolverOptions::default())
}

pub fn qr_fit_with(
    y: &[f64],
    cols: &[&[f64]],
    tau: QuantileLevel,
    opts: &SolverOptions,
) -> Result<QrFit> {
    check_shapes(y, cols)?;
    let n = y.len();
    let t = tau.value();
    if cols.len() + 1 > n {
        return Err(QpcError::InvalidArgument(format!(
            "{} columns plus intercept exceed {n} observations",
            cols.len()
        )));
    }
    if cols.is_empty() {
        return Ok(intercept_only(y, t));
    }
    Projector::new(n, cols)?;
    solve_and_polish(y, cols, t, 0.0, opts, NormalSolve::Auto)
}

fn solve_and_polish(
    y: &[f64],
    cols: &[&[f64]],
    tau: f64,
    penalty: f64,
    opts: &SolverOptions,
    normal: NormalSolve,
) -> Result<QrFit> {
    let n = y.len();
    let design = ipm::Design { n, cols, penalty };
    let settings = ipm::IpmSettings {
        tol: opts.tol,
        max_iter: opts.max_iter,
        normal,
    };
    let out = ipm::solve(&design, y, tau, &settings);
    let polished = polish::polish(y, cols, tau, penalty, &out.beta);
    let (beta, ok) = match polished {
        Some(p) if p.verified => (p.beta, true),
        Some(p) => {
            let f_ipm = polish::objective(y, cols, tau, penalty, &out.beta);
            let f_v = polish::objective(y, cols, tau, penalty, &p.beta);
            if f_v <= f_ipm {
                (p.beta, out.converged)
            } else {
                (out.beta, out.converged)
            }
        }
        None => (out.beta, out.converged),
    };
    if !ok {
        return Err(QpcError::NotConverged {
            iterations: out.iterations,
        });
    }
    let mut residuals = residuals_of(y, cols, &beta);
    // basis rows of a vertex fit exactly; strip the rounding noise so their
    // sign (and hence psi) is well defined
    for (r, yi) in residuals.iter_mut().zip(y) {
        if r.abs() <= ZERO_RESIDUAL * (1.0 + yi.abs()) {
            *r = 0.0;
        }
    }
    let lambda = penalty / n as f64;
    let objective =
        mean_check_loss(&residuals, tau) + lambda * beta[1..].iter().map(|b| b.abs()).sum::<f64>();
    Ok(QrFit {
        beta,
        residuals,
        objective,
        iterations: out.iterations,
        converged: true,
    })
}

/// Minimizes `(1/n) sum rho_tau(y_i - b0 - x_i'b) + lambda ||b||_1`; the
/// intercept is not penalized. Columns may outnumber observations.
pub fn qr_fit_l1(y: &[f64], cols: &[&[f64]], tau: QuantileLevel, lambda: f64) -> Result<QrFit> {
    qr_fit_l1_with(y, cols, tau, lambda, &SolverOptions::default())
}

pub fn qr_fit_l1_with(
    y: &[f64],
    cols: &[&[f64]],
    tau: QuantileLevel,
    lambda: f64,
    opts: &SolverOptions,
) -> Result<QrFit> {
    l1_fit_inner(y, cols, tau, lambda, opts, NormalSolve::Auto)
}

pub(crate) fn l1_fit_inner(
    y: &[f64],
    cols: &[&[f64]],
    tau: QuantileLevel,
    lambda: f64,
    opts: &SolverOptions,
    normal: NormalSolve,
) -> Result<QrFit> {
    check_shapes(y, cols)?;
    if !(lambda >= 0.0) || !lambda.is_finite() {
        return Err(QpcError::InvalidArgument(format!("penalty {lambda} must be >= 0")));
    }
    if lambda == 0.0 {
        return qr_fit_with(y, cols, tau, opts);
    }
    if cols.is_empty() {
        return Ok(intercept_only(y, tau.value()));
    }
    // at or beyond lambda_max the null model is optimal, and the interior
    // point may land elsewhere on a flat optimal face
    if lambda >= lambda_max(y, cols, tau)? {
        let mut fit = intercept_only(y, tau.value());
        fit.beta.resize(cols.len() + 1, 0.0);
        return Ok(fit);
    }
    let n = y.len();
    solve_and_polish(y, cols, tau.value(), lambda * n as f64, opts, normal)
}

/// Smallest penalty at which the all-zero-slope fit is optimal.
///
/// At the intercept-only fit, residuals away from zero carry `psi_tau`; the
/// weights of zero residuals are set so the intercept's stationarity
/// condition (weights summing to zero) holds, which makes the bound exact.
pub fn lambda_max(y: &[f64], cols: &[&[f64]], tau: QuantileLevel) -> Result<f64> {
    check_shapes(y, cols)?;
    let t = tau.value();
    let q = empirical_quantile(y, t);
    let n = y.len() as f64;
    let mut weights: Vec<f64> = y.iter().map(|v| psi(v - q, t)).collect();
    let zeros: Vec<usize> = (0..y.len()).filter(|&i| y[i] == q).collect();
    let off: f64 = (0..y.len()).filter(|i| y[*i] != q).map(|i| weights[i]).sum();
    let share = -off / zeros.len() as f64;
    for &i in &zeros {
        weights[i] = share;
    }
    Ok(cols
        .iter()
        .map(|col| (col.iter().zip(&weights).map(|(x, w)| x * w).sum::<f64>() / n).abs())
        .fold(0.0, f64::max))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LambdaPath {
    /// Decreasing penalties, starting at `lambda_max`.
    pub lambdas: Vec<f64>,
    pub fits: Vec<QrFit>,
    /// Number of nonzero slopes per fit.
    pub active: Vec<usize>,
}

/// Geometric penalty grid from `lambda_max` down to `lambda_max * 1e-3`.
pub fn lambda_grid(lambda_max: f64, grid_size: usize) -> Vec<f64> {
    (0..grid_size)
        .map(|i| {
            if i == 0 {
                lambda_max
            } else if i + 1 == grid_size {
                lambda_max * 1e-3
            } else {
                lambda_max * 1e-3f64.powf(i as f64 / (grid_size - 1) as f64)
            }
        })
        .collect()
}

/// Fits every point of the penalty grid.
pub fn lambda_path(
    y: &[f64],
    cols: &[&[f64]],
    tau: QuantileLevel,
    grid_size: usize,
) -> Result<LambdaPath> {
    lambda_path_capped(y, cols, tau, grid_size, None)
}

/// Like [`lambda_path`], but stops after the first fit whose active set
/// exceeds `max_active`; information-criterion selection never looks past it.
pub fn lambda_path_capped(
    y: &[f64],
    cols: &[&[f64]],
    tau: QuantileLevel,
    grid_size: usize,
    max_active: Option<usize>,
) -> Result<LambdaPath> {
    if grid_size < 2 {
        return Err(QpcError::InvalidArgument("lambda grid needs at least 2 points".into()));
    }
    let lmax = lambda_max(y, cols, tau)?;
    if !(lmax > 0.0) {
        return Err(QpcError::InvalidArgument(
            "lambda_max is zero; no slope can enter the model".into(),
        ));
    }
    let mut path = LambdaPath {
        lambdas: Vec::new(),
        fits: Vec::new(),
        active: Vec::new(),
    };
    for lambda in lambda_grid(lmax, grid_size) {
        let fit = qr_fit_l1(y, cols, tau, lambda)?;
        let d = fit.active_set().len();
        path.lambdas.push(lambda);
        path.fits.push(fit);
        path.active.push(d);
        if max_active.is_some_and(|cap| d > cap) {
            break;
        }
    }
    Ok(path)
}
