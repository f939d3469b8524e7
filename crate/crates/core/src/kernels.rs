//! Dense linear-algebra primitives shared by the solvers and the screening loops.
//!
//! Everything here works on column-major data: a predictor panel is a list of
//! columns, and conditioning sets are small (tens of columns at most), so the
//! routines favour direct factorizations over anything iterative.

use serde::{Deserialize, Serialize};

use crate::error::{QpcError, Result};

/// Relative pivot below which a conditioning column counts as collinear.
pub const RANK_TOL: f64 = 1e-10;

/// Variance at or below which a column is treated as constant.
pub const DEGENERATE_VAR: f64 = 1e-14;

/// Aligned response and predictor panel: row `i` pairs `y[i]` with `X[i, ..]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    y: Vec<f64>,
    columns: Vec<Vec<f64>>,
    names: Vec<String>,
}

impl Dataset {
    pub fn new(y: Vec<f64>, columns: Vec<Vec<f64>>, names: Vec<String>) -> Result<Self> {
        let n = y.len();
        if n < 2 {
            return Err(QpcError::InvalidDataset(format!("need n >= 2, got {n}")));
        }
        if columns.is_empty() {
            return Err(QpcError::InvalidDataset("need at least one predictor".into()));
        }
        if names.len() != columns.len() {
            return Err(QpcError::InvalidDataset(format!(
                "{} names for {} columns",
                names.len(),
                columns.len()
            )));
        }
        let mut seen = std::collections::HashSet::new();
        for name in &names {
            if !seen.insert(name.as_str()) {
                return Err(QpcError::InvalidDataset(format!("duplicate column name {name}")));
            }
        }
        if y.iter().any(|v| !v.is_finite()) {
            return Err(QpcError::InvalidDataset("non-finite response value".into()));
        }
        for (j, col) in columns.iter().enumerate() {
            if col.len() != n {
                return Err(QpcError::InvalidDataset(format!(
                    "column {} has {} rows, expected {n}",
                    names[j],
                    col.len()
                )));
            }
            if col.iter().any(|v| !v.is_finite()) {
                return Err(QpcError::InvalidDataset(format!(
                    "non-finite value in column {}",
                    names[j]
                )));
            }
        }
        Ok(Self { y, columns, names })
    }

    /// Builds a dataset with generated names `x1..xp`.
    pub fn unnamed(y: Vec<f64>, columns: Vec<Vec<f64>>) -> Result<Self> {
        let names = (1..=columns.len()).map(|j| format!("x{j}")).collect();
        Self::new(y, columns, names)
    }

    pub fn n(&self) -> usize {
        self.y.len()
    }

    pub fn p(&self) -> usize {
        self.columns.len()
    }

    pub fn y(&self) -> &[f64] {
        &self.y
    }

    pub fn column(&self, j: usize) -> &[f64] {
        &self.columns[j]
    }

    pub fn columns_at(&self, idx: &[usize]) -> Vec<&[f64]> {
        idx.iter().map(|&j| self.columns[j].as_slice()).collect()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn name(&self, j: usize) -> &str {
        &self.names[j]
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    /// Reads a CSV with a header row of column names and numeric rows. The
    /// response is the named column, or the first column if none is given;
    /// every other column becomes a predictor.
    pub fn from_csv<R: std::io::Read>(reader: R, response: Option<&str>) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
        let header: Vec<String> = rdr
            .headers()
            .map_err(|e| QpcError::Parse { row: 1, column: 0, message: e.to_string() })?
            .iter()
            .map(str::to_string)
            .collect();
        let yk = match response {
            Some(name) => header
                .iter()
                .position(|h| h == name)
                .ok_or_else(|| QpcError::UnknownSeries(name.to_string()))?,
            None => 0,
        };
        let mut cols = vec![Vec::new(); header.len()];
        for (i, rec) in rdr.records().enumerate() {
            let rec = rec.map_err(|e| QpcError::Parse { row: i + 2, column: 0, message: e.to_string() })?;
            let row = rec.position().map_or(i + 2, |p| p.line() as usize);
            for (k, cell) in rec.iter().enumerate() {
                let v: f64 = cell.parse().map_err(|_| QpcError::Parse {
                    row,
                    column: k + 1,
                    message: format!("{cell:?} is not a number"),
                })?;
                cols[k].push(v);
            }
        }
        let y = cols.remove(yk);
        let mut names = header;
        names.remove(yk);
        Self::new(y, cols, names)
    }
}

/// Least-squares projection of one column on the intercept plus a conditioning set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OlsFit {
    /// Intercept first, then one coefficient per conditioning column.
    pub theta: Vec<f64>,
    pub residuals: Vec<f64>,
    /// Mean squared residual (divide by n).
    pub sigma2: f64,
}

/// Orthonormal basis for `span{1, cols...}` built by modified Gram-Schmidt
/// with one reorthogonalization pass.
///
/// Conditioning sets are reused across many candidate columns in the
/// screening loops, so the factorization is kept around and applied with
/// `residualize`.
#[derive(Debug, Clone)]
pub struct Projector {
    n: usize,
    basis: Vec<Vec<f64>>,
    // upper-triangular R (row-major, k x k) with [1, cols] = Q R
    r: Vec<f64>,
}

impl Projector {
    /// Fails with `RankDeficient { column }` where `column` is the position in
    /// `cols` of the first column that is collinear with its predecessors.
    pub fn new(n: usize, cols: &[&[f64]]) -> Result<Self> {
        let k = cols.len() + 1;
        let mut basis: Vec<Vec<f64>> = Vec::with_capacity(k);
        let mut r = vec![0.0; k * k];
        let sqrt_n = (n as f64).sqrt();
        basis.push(vec![1.0 / sqrt_n; n]);
        r[0] = sqrt_n;
        for (c, col) in cols.iter().enumerate() {
            debug_assert_eq!(col.len(), n);
            let mean = col.iter().sum::<f64>() / n as f64;
            let centered_ss: f64 = col.iter().map(|v| (v - mean) * (v - mean)).sum();
            let mut v = col.to_vec();
            let row = c + 1;
            for _pass in 0..2 {
                for (b, q) in basis.iter().enumerate() {
                    let coef = dot(q, &v);
                    r[b * k + row] += coef;
                    axpy(-coef, q, &mut v);
                }
            }
            let ss = dot(&v, &v);
            if centered_ss <= DEGENERATE_VAR * n as f64 || ss <= RANK_TOL * centered_ss {
                return Err(QpcError::RankDeficient { column: c });
            }
            let norm = ss.sqrt();
            r[row * k + row] = norm;
            v.iter_mut().for_each(|x| *x /= norm);
            basis.push(v);
        }
        Ok(Self { n, basis, r })
    }

    /// Number of basis vectors, intercept included.
    pub fn rank(&self) -> usize {
        self.basis.len()
    }

    pub fn residualize(&self, x: &[f64]) -> Vec<f64> {
        let mut v = x.to_vec();
        for _pass in 0..2 {
            for q in &self.basis {
                let coef = dot(q, &v);
                axpy(-coef, q, &mut v);
            }
        }
        v
    }

    /// OLS coefficients (intercept first) of `x` on the projector's columns.
    pub fn coefficients(&self, x: &[f64]) -> Vec<f64> {
        let k = self.basis.len();
        let qtx: Vec<f64> = self.basis.iter().map(|q| dot(q, x)).collect();
        let mut theta = vec![0.0; k];
        for i in (0..k).rev() {
            let mut s = qtx[i];
            for j in i + 1..k {
                s -= self.r[i * k + j] * theta[j];
            }
            theta[i] = s / self.r[i * k + i];
        }
        theta
    }

    pub fn fit(&self, x: &[f64]) -> OlsFit {
        let residuals = self.residualize(x);
        let sigma2 = dot(&residuals, &residuals) / self.n as f64;
        OlsFit {
            theta: self.coefficients(x),
            residuals,
            sigma2,
        }
    }
}

/// OLS of column `target` on the intercept plus `cond_set`.
pub fn ols_fit(dataset: &Dataset, target_col: usize, cond_set: &[usize]) -> Result<OlsFit> {
    if target_col >= dataset.p() || cond_set.iter().any(|&c| c >= dataset.p()) {
        return Err(QpcError::InvalidArgument("column index out of range".into()));
    }
    if cond_set.contains(&target_col) {
        return Err(QpcError::CandidateInConditioningSet {
            candidate: target_col,
        });
    }
    let cols = dataset.columns_at(cond_set);
    let proj = Projector::new(dataset.n(), &cols).map_err(|e| match e {
        QpcError::RankDeficient { column } => QpcError::RankDeficient {
            column: cond_set[column],
        },
        other => other,
    })?;
    Ok(proj.fit(dataset.column(target_col)))
}

pub(crate) fn mean_var(x: &[f64]) -> (f64, f64) {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, var)
}

/// Sample Pearson correlation. `DegenerateColumn { column }` reports which
/// argument (0 or 1) has no variance.
pub fn pearson_corr(x_a: &[f64], x_b: &[f64]) -> Result<f64> {
    if x_a.len() != x_b.len() || x_a.len() < 2 {
        return Err(QpcError::InvalidArgument(
            "correlation needs two vectors of equal length >= 2".into(),
        ));
    }
    let (ma, va) = mean_var(x_a);
    let (mb, vb) = mean_var(x_b);
    if va <= DEGENERATE_VAR {
        return Err(QpcError::DegenerateColumn { column: 0 });
    }
    if vb <= DEGENERATE_VAR {
        return Err(QpcError::DegenerateColumn { column: 1 });
    }
    let n = x_a.len() as f64;
    let cov = x_a
        .iter()
        .zip(x_b)
        .map(|(a, b)| (a - ma) * (b - mb))
        .sum::<f64>()
        / n;
    Ok((cov / (va.sqrt() * vb.sqrt())).clamp(-1.0, 1.0))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ColumnScale {
    pub mean: f64,
    pub sd: f64,
}

/// Centers and scales every predictor column to mean 0, sd 1 (divide-by-n).
/// The response is left untouched.
pub fn standardize(dataset: &Dataset) -> Result<(Dataset, Vec<ColumnScale>)> {
    let mut cols = Vec::with_capacity(dataset.p());
    let mut scales = Vec::with_capacity(dataset.p());
    for j in 0..dataset.p() {
        let col = dataset.column(j);
        let (mean, var) = mean_var(col);
        if var <= DEGENERATE_VAR {
            return Err(QpcError::DegenerateColumn { column: j });
        }
        let sd = var.sqrt();
        cols.push(col.iter().map(|v| (v - mean) / sd).collect());
        scales.push(ColumnScale { mean, sd });
    }
    let ds = Dataset::new(dataset.y().to_vec(), cols, dataset.names().to_vec())?;
    Ok((ds, scales))
}

pub fn destandardize(dataset: &Dataset, scales: &[ColumnScale]) -> Result<Dataset> {
    if scales.len() != dataset.p() {
        return Err(QpcError::InvalidArgument("scale count does not match columns".into()));
    }
    let cols = scales
        .iter()
        .enumerate()
        .map(|(j, s)| dataset.column(j).iter().map(|v| v * s.sd + s.mean).collect())
        .collect();
    Dataset::new(dataset.y().to_vec(), cols, dataset.names().to_vec())
}

#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    // four accumulators let the compiler vectorize without reassociation flags
    let mut acc = [0.0f64; 4];
    let chunks = a.len() / 4;
    for c in 0..chunks {
        let i = 4 * c;
        acc[0] += a[i] * b[i];
        acc[1] += a[i + 1] * b[i + 1];
        acc[2] += a[i + 2] * b[i + 2];
        acc[3] += a[i + 3] * b[i + 3];
    }
    let mut s = (acc[0] + acc[1]) + (acc[2] + acc[3]);
    for i in 4 * chunks..a.len() {
        s += a[i] * b[i];
    }
    s
}

#[inline]
pub(crate) fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

/// Cholesky factor of a dense symmetric positive (semi)definite matrix.
///
/// Pivots that collapse below `tol * max_diag` are replaced by a huge value,
/// which zeroes the corresponding solution component instead of failing; the
/// interior-point iterations rely on this near convergence.
#[derive(Debug, Clone)]
pub(crate) struct Cholesky {
    k: usize,
    l: Vec<f64>,
}

impl Cholesky {
    pub(crate) fn factor(mut a: Vec<f64>, k: usize, tol: f64) -> Self {
        debug_assert_eq!(a.len(), k * k);
        let max_diag = (0..k).map(|i| a[i * k + i].abs()).fold(0.0, f64::max).max(f64::MIN_POSITIVE);
        for j in 0..k {
            let mut d = a[j * k + j];
            for p in 0..j {
                d -= a[j * k + p] * a[j * k + p];
            }
            if d <= tol * max_diag {
                a[j * k + j] = 1e64;
                for i in j + 1..k {
                    a[i * k + j] = 0.0;
                }
                continue;
            }
            let d = d.sqrt();
            a[j * k + j] = d;
            for i in j + 1..k {
                let mut s = a[i * k + j];
                let (ri, rj) = (&a[i * k..i * k + j], &a[j * k..j * k + j]);
                s -= dot(ri, rj);
                a[i * k + j] = s / d;
            }
        }
        Self { k, l: a }
    }

    pub(crate) fn solve(&self, b: &[f64]) -> Vec<f64> {
        let k = self.k;
        let mut x = b.to_vec();
        for i in 0..k {
            let mut s = x[i];
            for p in 0..i {
                s -= self.l[i * k + p] * x[p];
            }
            x[i] = s / self.l[i * k + i];
        }
        for i in (0..k).rev() {
            let mut s = x[i];
            for p in i + 1..k {
                s -= self.l[p * k + i] * x[p];
            }
            x[i] = s / self.l[i * k + i];
        }
        x
    }
}

/// Solves the square system `a x = b` (row-major `a`) by Gaussian elimination
/// with partial pivoting. Returns `None` when a pivot falls below
/// `tol` relative to the largest entry of its column.
pub(crate) fn solve_square(mut a: Vec<f64>, mut b: Vec<f64>, tol: f64) -> Option<Vec<f64>> {
    let k = b.len();
    debug_assert_eq!(a.len(), k * k);
    let col_scale: Vec<f64> = (0..k)
        .map(|j| (0..k).map(|i| a[i * k + j].abs()).fold(0.0, f64::max))
        .collect();
    for c in 0..k {
        let (piv, pval) = (c..k)
            .map(|i| (i, a[i * k + c].abs()))
            .fold((c, -1.0), |acc, x| if x.1 > acc.1 { x } else { acc });
        if pval <= tol * col_scale[c].max(f64::MIN_POSITIVE) || pval == 0.0 {
            return None;
        }
        if piv != c {
            for j in 0..k {
                a.swap(c * k + j, piv * k + j);
            }
            b.swap(c, piv);
        }
        let d = a[c * k + c];
        for i in c + 1..k {
            let f = a[i * k + c] / d;
            if f == 0.0 {
                continue;
            }
            for j in c..k {
                a[i * k + j] -= f * a[c * k + j];
            }
            b[i] -= f * b[c];
        }
    }
    let mut x = vec![0.0; k];
    for i in (0..k).rev() {
        let mut s = b[i];
        for j in i + 1..k {
            s -= a[i * k + j] * x[j];
        }
        x[i] = s / a[i * k + i];
    }
    Some(x)
}
