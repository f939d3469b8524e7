//! Frisch-Newton interior-point solver for (optionally l1-penalized) linear
//! quantile regression.
//!
//! The solver works on the bounded dual of the quantile regression LP,
//!
//! ```text
//!     min  -y_aug' a   s.t.  X_aug' a = (1 - tau) X_aug' 1,   0 <= a <= 1,
//! ```
//!
//! with a Mehrotra predictor-corrector step. The l1 penalty enters as two
//! pseudo-observations per slope with response 0 and design rows `+c e_k`,
//! `-c e_k`, since `rho_tau(c b) + rho_tau(-c b) = c |b|`. Those rows only
//! touch the diagonal of the normal matrix, which is what makes the low-rank
//! (Woodbury) solve possible when there are more slopes than observations.

use crate::kernels::{axpy, dot, Cholesky};

const STEP_DAMPING: f64 = 0.99995;
const PIVOT_TOL: f64 = 1e-15;
const REFINE_STEPS: usize = 3;
/// Pseudo-row to data weight ratio below which a slope is solved explicitly.
const BLOCK_RATIO: f64 = 1e-3;

/// Intercept plus slope columns, with an optional per-slope penalty weight
/// `c` (the objective is `sum rho_tau(r_i) + c * sum |b_k|`).
pub(crate) struct Design<'a> {
    pub n: usize,
    pub cols: &'a [&'a [f64]],
    pub penalty: f64,
}

/// How the normal equations are factored. Library code always uses `Auto`;
/// the explicit variants let tests compare the two factorizations.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) enum NormalSolve {
    Auto,
    #[cfg_attr(not(test), allow(dead_code))]
    Dense,
    #[cfg_attr(not(test), allow(dead_code))]
    LowRank,
}

impl Design<'_> {
    fn p(&self) -> usize {
        self.cols.len()
    }

    fn k(&self) -> usize {
        self.cols.len() + 1
    }

    fn penalized(&self) -> bool {
        self.penalty > 0.0
    }

    /// Augmented row count: data rows, then a (+, -) pseudo pair per slope.
    fn rows(&self) -> usize {
        if self.penalized() {
            self.n + 2 * self.p()
        } else {
            self.n
        }
    }

    /// `X_aug' v` (length k).
    fn at(&self, v: &[f64]) -> Vec<f64> {
        let n = self.n;
        let mut out = Vec::with_capacity(self.k());
        out.push(v[..n].iter().sum());
        for (j, col) in self.cols.iter().enumerate() {
            let mut s = dot(col, &v[..n]);
            if self.penalized() {
                s += self.penalty * (v[n + 2 * j] - v[n + 2 * j + 1]);
            }
            out.push(s);
        }
        out
    }

    /// `X_aug u` (length rows()).
    fn a_t(&self, u: &[f64]) -> Vec<f64> {
        let n = self.n;
        let mut out = vec![0.0; self.rows()];
        out[..n].iter_mut().for_each(|v| *v = u[0]);
        for (j, col) in self.cols.iter().enumerate() {
            axpy(u[j + 1], col, &mut out[..n]);
            if self.penalized() {
                out[n + 2 * j] = self.penalty * u[j + 1];
                out[n + 2 * j + 1] = -self.penalty * u[j + 1];
            }
        }
        out
    }

    /// `X_aug' diag(q) X_aug v`, the normal matrix applied without forming it.
    fn normal_apply(&self, q: &[f64], v: &[f64]) -> Vec<f64> {
        let mut u = self.a_t(v);
        u.iter_mut().zip(q).for_each(|(a, b)| *a *= b);
        self.at(&u)
    }

    /// Factored solve, followed for the Woodbury path by iterative
    /// refinement against the exact normal operator: that path loses digits
    /// when some weights are extreme, which late iterations always produce.
    fn normal_solve(&self, factor: &NormalFactor, q: &[f64], rhs: &[f64]) -> Vec<f64> {
        let mut z = factor.solve(self, rhs);
        if matches!(factor, NormalFactor::Dense(_)) {
            return z;
        }
        let scale = rhs.iter().map(|v| v.abs()).fold(0.0, f64::max);
        for _ in 0..REFINE_STEPS {
            let mz = self.normal_apply(q, &z);
            let res: Vec<f64> = rhs.iter().zip(&mz).map(|(a, b)| a - b).collect();
            if res.iter().map(|v| v.abs()).fold(0.0, f64::max) <= 1e-14 * scale {
                break;
            }
            let dz = factor.solve(self, &res);
            axpy(1.0, &dz, &mut z);
        }
        z
    }

    fn factor(&self, q: &[f64], strategy: NormalSolve) -> NormalFactor {
        let low_rank = match strategy {
            NormalSolve::Dense => false,
            NormalSolve::LowRank => self.penalized(),
            NormalSolve::Auto => self.penalized() && self.p() > self.n,
        };
        if low_rank {
            self.factor_low_rank(q)
        } else {
            self.factor_dense(q)
        }
    }

    fn factor_dense(&self, q: &[f64]) -> NormalFactor {
        let n = self.n;
        let k = self.k();
        let qd = &q[..n];
        let weighted: Vec<Vec<f64>> = self
            .cols
            .iter()
            .map(|col| col.iter().zip(qd).map(|(x, w)| x * w).collect())
            .collect();
        let mut m = vec![0.0; k * k];
        m[0] = qd.iter().sum();
        for (a, wa) in weighted.iter().enumerate() {
            let s: f64 = wa.iter().sum();
            m[a + 1] = s;
            m[(a + 1) * k] = s;
            for (b, col_b) in self.cols.iter().enumerate().skip(a) {
                let s = dot(wa, col_b);
                m[(a + 1) * k + b + 1] = s;
                m[(b + 1) * k + a + 1] = s;
            }
        }
        if self.penalized() {
            let c2 = self.penalty * self.penalty;
            for j in 0..self.p() {
                m[(j + 1) * k + j + 1] += c2 * (q[n + 2 * j] + q[n + 2 * j + 1]);
            }
        }
        NormalFactor::Dense(Cholesky::factor(m, k, PIVOT_TOL))
    }

    /// Partitioned solve for the wide penalized case. Coordinates whose
    /// pseudo-row weight is small next to their data weight (the intercept,
    /// and slopes that are drifting away from zero) form a small block `L`
    /// handled through its Schur complement; the rest `R` has a dominant
    /// diagonal and is inverted by Woodbury with an n x n core. Applying
    /// Woodbury to all slopes at once breaks down near convergence, when the
    /// diagonal of the active slopes vanishes.
    fn factor_low_rank(&self, q: &[f64]) -> NormalFactor {
        let n = self.n;
        let p = self.p();
        let c2 = self.penalty * self.penalty;
        let qd = &q[..n];
        let e: Vec<f64> = (0..p).map(|j| c2 * (q[n + 2 * j] + q[n + 2 * j + 1])).collect();
        let data_w: Vec<f64> = self
            .cols
            .iter()
            .map(|col| col.iter().zip(qd).map(|(x, w)| x * x * w).sum())
            .collect();
        let mut ratio: Vec<(f64, usize)> = (0..p).map(|j| (e[j] / data_w[j].max(1e-300), j)).collect();
        ratio.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        let mut in_l = vec![false; p];
        for &(r, j) in ratio.iter().take(n.saturating_sub(1)) {
            if r < BLOCK_RATIO {
                in_l[j] = true;
            }
        }
        let l_cols: Vec<usize> = (0..p).filter(|&j| in_l[j]).collect();
        let r_cols: Vec<usize> = (0..p).filter(|&j| !in_l[j]).collect();
        let e_inv: Vec<f64> = r_cols.iter().map(|&j| 1.0 / e[j]).collect();

        let mut h = vec![0.0; n * n];
        for i in 0..n {
            h[i * n + i] = 1.0 / qd[i];
        }
        for (t, &j) in r_cols.iter().enumerate() {
            let col = self.cols[j];
            let ev = e_inv[t];
            for i in 0..n {
                let f = ev * col[i];
                if f == 0.0 {
                    continue;
                }
                let row = &mut h[i * n..i * n + i + 1];
                for (hv, x) in row.iter_mut().zip(&col[..=i]) {
                    *hv += f * x;
                }
            }
        }
        for i in 0..n {
            for j in 0..i {
                h[j * n + i] = h[i * n + j];
            }
        }
        let mut lr = LowRank {
            l_coords: Vec::with_capacity(l_cols.len() + 1),
            r_cols,
            e_inv,
            core: Cholesky::factor(h, n, 0.0),
            m_rl: Vec::new(),
            w: Vec::new(),
            schur: Cholesky::factor(vec![1.0], 1, 0.0),
        };
        // the intercept always belongs to L (it carries no pseudo rows)
        let ones = vec![1.0; n];
        let mut l_vecs: Vec<&[f64]> = vec![&ones];
        lr.l_coords.push(0);
        for &j in &l_cols {
            l_vecs.push(self.cols[j]);
            lr.l_coords.push(j + 1);
        }
        let nl = l_vecs.len();
        let weighted: Vec<Vec<f64>> = l_vecs
            .iter()
            .map(|v| v.iter().zip(qd).map(|(a, b)| a * b).collect())
            .collect();
        let m_rl: Vec<Vec<f64>> = weighted
            .iter()
            .map(|wv| lr.r_cols.iter().map(|&j| dot(self.cols[j], wv)).collect())
            .collect();
        lr.w = m_rl.iter().map(|col| lr.rr_inv(self, col)).collect();
        lr.m_rl = m_rl;
        let mut s_mat = vec![0.0; nl * nl];
        for a in 0..nl {
            for b in a..nl {
                let mut v = dot(&weighted[a], l_vecs[b]) - dot(&lr.m_rl[a], &lr.w[b]);
                if a == b && a > 0 {
                    v += e[l_cols[a - 1]];
                }
                s_mat[a * nl + b] = v;
                s_mat[b * nl + a] = v;
            }
        }
        lr.schur = Cholesky::factor(s_mat, nl, PIVOT_TOL);
        NormalFactor::LowRank(lr)
    }
}

struct LowRank {
    /// Coordinates (0 = intercept, j + 1 = slope j) in the explicit block.
    l_coords: Vec<usize>,
    r_cols: Vec<usize>,
    e_inv: Vec<f64>,
    core: Cholesky,
    /// `M_RL` and `M_RR^{-1} M_RL`, one vector per explicit coordinate.
    m_rl: Vec<Vec<f64>>,
    w: Vec<Vec<f64>>,
    schur: Cholesky,
}

impl LowRank {
    /// `M_RR^{-1} v` by Woodbury over the data rows.
    fn rr_inv(&self, d: &Design<'_>, v: &[f64]) -> Vec<f64> {
        let t: Vec<f64> = v.iter().zip(&self.e_inv).map(|(a, b)| a * b).collect();
        let mut u = vec![0.0; d.n];
        for (tv, &j) in t.iter().zip(&self.r_cols) {
            axpy(*tv, d.cols[j], &mut u);
        }
        let h = self.core.solve(&u);
        self.r_cols
            .iter()
            .enumerate()
            .map(|(s, &j)| t[s] - self.e_inv[s] * dot(d.cols[j], &h))
            .collect()
    }

    fn solve(&self, d: &Design<'_>, rhs: &[f64]) -> Vec<f64> {
        let b_r: Vec<f64> = self.r_cols.iter().map(|&j| rhs[j + 1]).collect();
        let t_r = self.rr_inv(d, &b_r);
        let b_l: Vec<f64> = self
            .l_coords
            .iter()
            .zip(&self.m_rl)
            .map(|(&c, m)| rhs[c] - dot(m, &t_r))
            .collect();
        let z_l = self.schur.solve(&b_l);
        let mut out = vec![0.0; rhs.len()];
        let mut z_r = t_r;
        for (zl, w) in z_l.iter().zip(&self.w) {
            axpy(-zl, w, &mut z_r);
        }
        for (&j, v) in self.r_cols.iter().zip(&z_r) {
            out[j + 1] = *v;
        }
        for (&c, v) in self.l_coords.iter().zip(&z_l) {
            out[c] = *v;
        }
        out
    }
}

enum NormalFactor {
    Dense(Cholesky),
    LowRank(LowRank),
}

impl NormalFactor {
    fn solve(&self, d: &Design<'_>, rhs: &[f64]) -> Vec<f64> {
        match self {
            NormalFactor::Dense(ch) => ch.solve(rhs),
            NormalFactor::LowRank(lr) => lr.solve(d, rhs),
        }
    }
}

pub(crate) struct IpmOutcome {
    pub beta: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
}

pub(crate) struct IpmSettings {
    pub tol: f64,
    pub max_iter: usize,
    pub normal: NormalSolve,
}

fn step_to_bound(v: &[f64], dv: &[f64]) -> f64 {
    v.iter()
        .zip(dv)
        .filter(|(_, d)| **d < 0.0)
        .map(|(x, d)| -x / d)
        .fold(f64::INFINITY, f64::min)
}

fn primal_objective(d: &Design<'_>, y: &[f64], beta: &[f64], tau: f64) -> f64 {
    let mut fitted = vec![beta[0]; d.n];
    for (j, col) in d.cols.iter().enumerate() {
        axpy(beta[j + 1], col, &mut fitted);
    }
    let loss: f64 = y
        .iter()
        .zip(&fitted)
        .map(|(yi, fi)| super::check_loss(yi - fi, tau))
        .sum();
    loss + d.penalty * beta[1..].iter().map(|b| b.abs()).sum::<f64>()
}

pub(crate) fn solve(d: &Design<'_>, y: &[f64], tau: f64, settings: &IpmSettings) -> IpmOutcome {
    let big_n = d.rows();
    let n = d.n;
    // LP cost is the negated augmented response
    let mut cost = vec![0.0; big_n];
    for (c, yi) in cost.iter_mut().zip(y) {
        *c = -yi;
    }
    let mut x = vec![1.0 - tau; big_n];
    let mut s = vec![tau; big_n];

    let ones = vec![1.0; big_n];
    let start = d.factor(&ones, settings.normal);
    let mut ydual = d.normal_solve(&start, &ones, &d.at(&cost));
    let aty = d.a_t(&ydual);
    let mut r: Vec<f64> = cost.iter().zip(&aty).map(|(c, a)| c - a).collect();
    let scale = r.iter().map(|v| v.abs()).sum::<f64>() / big_n as f64;
    let nudge = 1e-3 * scale.max(1e-300);
    for v in r.iter_mut() {
        if *v == 0.0 {
            *v = nudge;
        }
    }
    let mut z: Vec<f64> = r.iter().map(|v| v.max(0.0)).collect();
    let mut w: Vec<f64> = z.iter().zip(&r).map(|(zi, ri)| zi - ri).collect();

    let mut converged = false;
    let mut iterations = 0;
    let mut stalls = 0;
    let mut best: Option<(f64, Vec<f64>)> = None;
    while iterations < settings.max_iter {
        iterations += 1;
        let q: Vec<f64> = (0..big_n)
            .map(|i| 1.0 / (z[i] / x[i] + w[i] / s[i]))
            .collect();
        let rr: Vec<f64> = z.iter().zip(&w).map(|(a, b)| a - b).collect();
        let factor = d.factor(&q, settings.normal);
        let qr: Vec<f64> = q.iter().zip(&rr).map(|(a, b)| a * b).collect();
        let mut dy = d.normal_solve(&factor, &q, &d.at(&qr));
        let mut atdy = d.a_t(&dy);
        let mut dx: Vec<f64> = (0..big_n).map(|i| q[i] * (atdy[i] - rr[i])).collect();
        let mut ds: Vec<f64> = dx.iter().map(|v| -v).collect();
        let mut dz: Vec<f64> = (0..big_n).map(|i| -z[i] * (dx[i] / x[i] + 1.0)).collect();
        let mut dw: Vec<f64> = (0..big_n).map(|i| -w[i] * (ds[i] / s[i] + 1.0)).collect();
        let mut fp = step_to_bound(&x, &dx).min(step_to_bound(&s, &ds));
        let mut fd = step_to_bound(&w, &dw).min(step_to_bound(&z, &dz));
        fp = (STEP_DAMPING * fp).min(1.0);
        fd = (STEP_DAMPING * fd).min(1.0);

        if fp.min(fd) < 1.0 {
            let mu0 = dot(&z, &x) + dot(&w, &s);
            let g: f64 = (0..big_n)
                .map(|i| {
                    (z[i] + fd * dz[i]) * (x[i] + fp * dx[i])
                        + (w[i] + fd * dw[i]) * (s[i] + fp * ds[i])
                })
                .sum();
            let mu = mu0 * (g / mu0).powi(3) / (2.0 * big_n as f64);
            let t: Vec<f64> = (0..big_n)
                .map(|i| {
                    mu * (1.0 / x[i] - 1.0 / s[i]) - dx[i] * dz[i] / x[i] + ds[i] * dw[i] / s[i]
                })
                .collect();
            let corr_rhs: Vec<f64> = (0..big_n).map(|i| q[i] * (rr[i] - t[i])).collect();
            dy = d.normal_solve(&factor, &q, &d.at(&corr_rhs));
            atdy = d.a_t(&dy);
            let (dxa, dsa, dza, dwa) = (dx, ds, dz, dw);
            dx = (0..big_n).map(|i| q[i] * (atdy[i] + t[i] - rr[i])).collect();
            ds = dx.iter().map(|v| -v).collect();
            dz = (0..big_n)
                .map(|i| mu / x[i] - z[i] - z[i] / x[i] * dx[i] - dxa[i] * dza[i] / x[i])
                .collect();
            dw = (0..big_n)
                .map(|i| mu / s[i] - w[i] - w[i] / s[i] * ds[i] - dsa[i] * dwa[i] / s[i])
                .collect();
            fp = step_to_bound(&x, &dx).min(step_to_bound(&s, &ds));
            fd = step_to_bound(&w, &dw).min(step_to_bound(&z, &dz));
            fp = (STEP_DAMPING * fp).min(1.0);
            fd = (STEP_DAMPING * fd).min(1.0);
        }

        axpy(fp, &dx, &mut x);
        axpy(fp, &ds, &mut s);
        axpy(fd, &dy, &mut ydual);
        axpy(fd, &dz, &mut z);
        axpy(fd, &dw, &mut w);

        let gap = dot(&z, &x) + dot(&w, &s);
        let beta: Vec<f64> = ydual.iter().map(|v| -v).collect();
        let obj = primal_objective(d, &y[..n], &beta, tau);
        if !gap.is_finite() || !obj.is_finite() {
            break;
        }
        if best.as_ref().is_none_or(|(o, _)| obj < *o) {
            best = Some((obj, beta));
        }
        if gap <= settings.tol * (1.0 + obj.abs()) {
            converged = true;
            break;
        }
        if fp.max(fd) < 1e-10 {
            stalls += 1;
            if stalls >= 3 {
                break;
            }
        } else {
            stalls = 0;
        }
    }
    let beta = if converged {
        ydual.iter().map(|v| -v).collect()
    } else {
        best.map(|(_, b)| b).unwrap_or_else(|| ydual.iter().map(|v| -v).collect())
    };
    IpmOutcome {
        beta,
        iterations,
        converged,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn lcg(seed: u64) -> impl FnMut() -> f64 {
        let mut s = seed;
        move || {
            s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            ((s >> 11) as f64) / ((1u64 << 53) as f64) - 0.5
        }
    }

    #[test]
    fn dense_and_low_rank_normal_solves_agree() {
        let mut r = lcg(11);
        let n = 6;
        let p = 9;
        let cols: Vec<Vec<f64>> = (0..p).map(|_| (0..n).map(|_| r()).collect()).collect();
        let refs: Vec<&[f64]> = cols.iter().map(|c| c.as_slice()).collect();
        let d = Design {
            n,
            cols: &refs,
            penalty: 0.7,
        };
        let q: Vec<f64> = (0..d.rows()).map(|_| 0.6 + r()).collect();
        let rhs: Vec<f64> = (0..p + 1).map(|_| r()).collect();
        let a = d.factor(&q, NormalSolve::Dense).solve(&d, &rhs);
        let b = d.factor(&q, NormalSolve::LowRank).solve(&d, &rhs);
        for (u, v) in a.iter().zip(&b) {
            assert!((u - v).abs() < 1e-9, "{u} vs {v}");
        }
    }

    #[test]
    fn adjoint_operators_are_consistent() {
        let mut r = lcg(5);
        let n = 7;
        let cols: Vec<Vec<f64>> = (0..3).map(|_| (0..n).map(|_| r()).collect()).collect();
        let refs: Vec<&[f64]> = cols.iter().map(|c| c.as_slice()).collect();
        let d = Design {
            n,
            cols: &refs,
            penalty: 1.3,
        };
        let v: Vec<f64> = (0..d.rows()).map(|_| r()).collect();
        let u: Vec<f64> = (0..4).map(|_| r()).collect();
        // <X' v, u> == <v, X u>
        assert!((dot(&d.at(&v), &u) - dot(&v, &d.a_t(&u))).abs() < 1e-12);
    }
}
