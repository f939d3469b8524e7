//! Crossover from an interior-point iterate to an exact vertex of the
//! quantile regression LP, with a KKT certificate.
//!
//! The smallest augmented residuals of a near-optimal interior point mark the
//! optimal basis: data rows with (near) zero residual pin the fit, slopes whose
//! penalty rows have (near) zero residual are fixed at exactly zero. Solving
//! that square system gives a vertex; the dual weights of the basis rows then
//! certify (or refute) its optimality.

use super::{check_loss, psi, residuals_of};
use crate::kernels::{axpy, dot, solve_square};

const KKT_TOL: f64 = 1e-9;

pub(super) struct Polished {
    pub beta: Vec<f64>,
    pub verified: bool,
}

/// `sum rho_tau(r_i) + penalty * sum |slope|` (sum form, not mean).
pub(super) fn objective(y: &[f64], cols: &[&[f64]], tau: f64, penalty: f64, beta: &[f64]) -> f64 {
    let r = residuals_of(y, cols, beta);
    r.iter().map(|&v| check_loss(v, tau)).sum::<f64>()
        + penalty * beta[1..].iter().map(|b| b.abs()).sum::<f64>()
}

#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
enum Row {
    Slope(usize),
    Data(usize),
}

pub(super) fn polish(
    y: &[f64],
    cols: &[&[f64]],
    tau: f64,
    penalty: f64,
    beta: &[f64],
) -> Option<Polished> {
    let n = y.len();
    let p = cols.len();
    let k = p + 1;
    let r = residuals_of(y, cols, beta);

    let mut rows: Vec<(f64, Row)> = (0..n).map(|i| (r[i].abs(), Row::Data(i))).collect();
    if penalty > 0.0 {
        rows.extend((0..p).map(|j| (penalty * beta[j + 1].abs(), Row::Slope(j))));
    }
    rows.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));

    let mut fixed = vec![false; p];
    let mut n_fixed = 0;
    let mut data_order: Vec<usize> = Vec::with_capacity(n);
    let mut taken = 0;
    for &(_, row) in &rows {
        if n_fixed + taken >= k {
            match row {
                Row::Data(i) => data_order.push(i),
                Row::Slope(_) => {}
            }
            continue;
        }
        match row {
            Row::Slope(j) => {
                fixed[j] = true;
                n_fixed += 1;
            }
            Row::Data(i) => {
                data_order.push(i);
                taken += 1;
            }
        }
    }

    let free: Vec<usize> = (0..p).filter(|&j| !fixed[j]).collect();
    let f = free.len() + 1;
    if f > n {
        return None;
    }
    let row_vec = |i: usize| -> Vec<f64> {
        let mut v = Vec::with_capacity(f);
        v.push(1.0);
        v.extend(free.iter().map(|&j| cols[j][i]));
        v
    };

    // greedy independent basis, smallest residuals first
    let mut basis: Vec<usize> = Vec::with_capacity(f);
    let mut ortho: Vec<Vec<f64>> = Vec::with_capacity(f);
    for &i in &data_order {
        if basis.len() == f {
            break;
        }
        let v = row_vec(i);
        let norm2 = dot(&v, &v);
        let mut u = v;
        for _pass in 0..2 {
            for q in &ortho {
                let c = dot(q, &u);
                axpy(-c, q, &mut u);
            }
        }
        let rem = dot(&u, &u);
        if rem > 1e-12 * norm2 {
            let s = rem.sqrt();
            u.iter_mut().for_each(|x| *x /= s);
            ortho.push(u);
            basis.push(i);
        }
    }
    if basis.len() < f {
        return None;
    }

    let mut a = Vec::with_capacity(f * f);
    for &i in &basis {
        a.extend(row_vec(i));
    }
    let rhs: Vec<f64> = basis.iter().map(|&i| y[i]).collect();
    let sol = solve_square(a.clone(), rhs, 1e-13)?;
    let mut beta_v = vec![0.0; k];
    beta_v[0] = sol[0];
    for (t, &j) in free.iter().enumerate() {
        beta_v[j + 1] = sol[t + 1];
    }
    if beta_v.iter().any(|b| !b.is_finite()) {
        return None;
    }

    let verified = certify(y, cols, tau, penalty, &beta_v, &basis, &free, &a);
    Some(Polished {
        beta: beta_v,
        verified,
    })
}

/// Solves for the dual weights of the basis rows and checks the box and
/// penalty constraints.
#[allow(clippy::too_many_arguments)]
fn certify(
    y: &[f64],
    cols: &[&[f64]],
    tau: f64,
    penalty: f64,
    beta: &[f64],
    basis: &[usize],
    free: &[usize],
    basis_rows: &[f64],
) -> bool {
    let n = y.len();
    let f = basis.len();
    let r = residuals_of(y, cols, beta);
    let mut in_basis = vec![false; n];
    for &i in basis {
        in_basis[i] = true;
    }
    let mut weights: Vec<f64> = r.iter().map(|&v| psi(v, tau)).collect();

    // target_free - sum over non-basis rows of weight * row
    let mut rhs = vec![0.0; f];
    for (t, &j) in free.iter().enumerate() {
        if penalty > 0.0 {
            rhs[t + 1] = penalty * beta[j + 1].signum();
        }
    }
    for i in (0..n).filter(|&i| !in_basis[i]) {
        rhs[0] -= weights[i];
        for (t, &j) in free.iter().enumerate() {
            rhs[t + 1] -= weights[i] * cols[j][i];
        }
    }
    // transpose of the basis system
    let mut at = vec![0.0; f * f];
    for row in 0..f {
        for col in 0..f {
            at[col * f + row] = basis_rows[row * f + col];
        }
    }
    let Some(dual) = solve_square(at, rhs, 1e-13) else {
        return false;
    };
    for (&i, &a) in basis.iter().zip(&dual) {
        if a < tau - 1.0 - KKT_TOL || a > tau + KKT_TOL {
            return false;
        }
        weights[i] = a;
    }
    if penalty > 0.0 {
        let mut is_free = vec![false; cols.len()];
        for &j in free {
            is_free[j] = true;
        }
        for (j, col) in cols.iter().enumerate() {
            if is_free[j] {
                continue;
            }
            let s = dot(col, &weights);
            let scale: f64 = col.iter().map(|x| x.abs()).sum();
            if s.abs() > penalty * (1.0 + KKT_TOL) + KKT_TOL * scale {
                return false;
            }
        }
    }
    true
}
