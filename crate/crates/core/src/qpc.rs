//! Sample quantile partial correlation of a candidate predictor with the
//! response, given a conditioning set of other predictors.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{QpcError, Result};
use crate::kernels::{dot, Dataset, Projector};
use crate::quantreg::{psi, qr_fit, QuantileLevel};

/// OLS residual variance at or below which a candidate counts as explained
/// by its conditioning set.
pub const DEGENERATE_SIGMA2: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QpcValue {
    pub value: f64,
    /// `(1/n) sum psi_tau(y - alpha'z) (x_j - theta'z)`.
    pub numerator: f64,
    pub sigma2: f64,
    /// Quantile fit of the response on the conditioning set (intercept first).
    pub alpha_hat: Vec<f64>,
    /// OLS fit of the candidate on the conditioning set (intercept first).
    pub theta_hat: Vec<f64>,
}

/// Everything about a conditioning set that does not depend on the candidate.
pub(crate) struct Conditioned {
    scores: Vec<f64>,
    alpha_hat: Vec<f64>,
    projector: Projector,
}

impl Conditioned {
    pub(crate) fn new(ds: &Dataset, cond: &[usize], tau: QuantileLevel) -> Result<Self> {
        let n = ds.n();
        if cond.len() + 1 >= n {
            return Err(QpcError::InvalidArgument(format!(
                "conditioning set of size {} too large for {n} observations",
                cond.len()
            )));
        }
        let mut seen = cond.to_vec();
        seen.sort_unstable();
        if seen.windows(2).any(|w| w[0] == w[1]) {
            return Err(QpcError::InvalidArgument("duplicate index in conditioning set".into()));
        }
        if let Some(&bad) = seen.last().filter(|&&j| j >= ds.p()) {
            return Err(QpcError::InvalidArgument(format!("column {bad} out of range")));
        }
        let cols = ds.columns_at(cond);
        let projector = Projector::new(n, &cols).map_err(|e| match e {
            QpcError::RankDeficient { column } => QpcError::RankDeficient { column: cond[column] },
            other => other,
        })?;
        let fit = qr_fit(ds.y(), &cols, tau)?;
        let t = tau.value();
        Ok(Self {
            scores: fit.residuals.iter().map(|&r| psi(r, t)).collect(),
            alpha_hat: fit.beta,
            projector,
        })
    }

    pub(crate) fn qpc(&self, ds: &Dataset, j: usize, tau: QuantileLevel) -> Result<QpcValue> {
        let n = ds.n() as f64;
        let ols = self.projector.fit(ds.column(j));
        if ols.sigma2 <= DEGENERATE_SIGMA2 {
            return Err(QpcError::DegeneratePredictor {
                column: j,
                sigma2: ols.sigma2,
            });
        }
        let t = tau.value();
        let numerator = dot(&self.scores, &ols.residuals) / n;
        Ok(QpcValue {
            value: numerator / (t * (1.0 - t) * ols.sigma2).sqrt(),
            numerator,
            sigma2: ols.sigma2,
            alpha_hat: self.alpha_hat.clone(),
            theta_hat: ols.theta,
        })
    }
}

pub fn sample_qpc(ds: &Dataset, j: usize, cond: &[usize], tau: QuantileLevel) -> Result<QpcValue> {
    if j >= ds.p() {
        return Err(QpcError::InvalidArgument(format!("column {j} out of range")));
    }
    if cond.contains(&j) {
        return Err(QpcError::CandidateInConditioningSet { candidate: j });
    }
    Conditioned::new(ds, cond, tau)?.qpc(ds, j, tau)
}

/// Absolute QPC of several candidates against one conditioning set, with
/// per-candidate failures kept apart.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ScoreTable {
    pub scores: BTreeMap<usize, f64>,
    pub failures: BTreeMap<usize, QpcError>,
}

impl ScoreTable {
    /// Highest score; ties go to the smaller index.
    pub fn argmax(&self) -> Option<(usize, f64)> {
        best_of(self.scores.iter().map(|(&j, &s)| (j, s)))
    }
}

/// Highest score with smaller index winning ties; NaN scores never win.
pub(crate) fn best_of(items: impl IntoIterator<Item = (usize, f64)>) -> Option<(usize, f64)> {
    let mut best: Option<(usize, f64)> = None;
    for (j, s) in items {
        if s.is_nan() {
            continue;
        }
        best = match best {
            Some((bj, bs)) if bs > s || (bs == s && bj < j) => Some((bj, bs)),
            _ => Some((j, s)),
        };
    }
    best
}

/// The quantile fit on `cond` is done once and shared by every candidate.
pub fn qpc_screen_scores(
    ds: &Dataset,
    candidates: &[usize],
    cond: &[usize],
    tau: QuantileLevel,
) -> Result<ScoreTable> {
    if let Some(&j) = candidates.iter().find(|j| cond.contains(j)) {
        return Err(QpcError::CandidateInConditioningSet { candidate: j });
    }
    if let Some(&j) = candidates.iter().find(|&&j| j >= ds.p()) {
        return Err(QpcError::InvalidArgument(format!("column {j} out of range")));
    }
    let shared = Conditioned::new(ds, cond, tau)?;
    let results: Vec<(usize, Result<QpcValue>)> = candidates
        .par_iter()
        .map(|&j| (j, shared.qpc(ds, j, tau)))
        .collect();
    let mut table = ScoreTable::default();
    for (j, r) in results {
        match r {
            Ok(v) => {
                table.scores.insert(j, v.value.abs());
            }
            Err(e) => {
                table.failures.insert(j, e);
            }
        }
    }
    Ok(table)
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::{DMatrix, DVector};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    fn tau(t: f64) -> QuantileLevel {
        QuantileLevel::new(t).unwrap()
    }

    fn random_ds(rng: &mut ChaCha8Rng, n: usize, p: usize) -> Dataset {
        let cols: Vec<Vec<f64>> = (0..p)
            .map(|_| (0..n).map(|_| rng.sample(StandardNormal)).collect())
            .collect();
        let y = (0..n)
            .map(|i| cols[0][i] - 0.5 * cols[p - 1][i] + rng.sample::<f64, _>(StandardNormal))
            .collect();
        Dataset::unnamed(y, cols).unwrap()
    }

    #[test]
    fn candidate_inside_conditioning_set_is_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let ds = random_ds(&mut rng, 20, 3);
        let err = sample_qpc(&ds, 1, &[0, 1], tau(0.5)).unwrap_err();
        assert_eq!(err, QpcError::CandidateInConditioningSet { candidate: 1 });
        assert!(qpc_screen_scores(&ds, &[0, 2], &[2], tau(0.5)).is_err());
    }

    #[test]
    fn independent_noise_gives_small_value() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let n = 10_000;
        let y: Vec<f64> = (0..n).map(|_| rng.sample(StandardNormal)).collect();
        let x: Vec<f64> = (0..n).map(|_| rng.sample(StandardNormal)).collect();
        let ds = Dataset::unnamed(y, vec![x]).unwrap();
        assert!(sample_qpc(&ds, 0, &[], tau(0.5)).unwrap().value.abs() < 0.05);
    }

    /// Independent recomputation: quantile fit by exhaustive vertex search,
    /// OLS by explicit normal equations, then the ratio formula.
    #[test]
    fn matches_step_by_step_recomputation() {
        let y = vec![1.2, -0.4, 2.5, 0.3, 1.9, -1.1];
        let x0 = vec![0.5, -1.0, 1.5, 0.2, 0.9, -0.7];
        let x1 = vec![1.0, 0.4, -0.3, 2.2, -1.4, 0.6];
        let ds = Dataset::unnamed(y.clone(), vec![x0.clone(), x1.clone()]).unwrap();
        let t = 0.3;
        let got = sample_qpc(&ds, 1, &[0], tau(t)).unwrap();

        let mut best = (f64::INFINITY, (0.0, 0.0));
        for a in 0..6 {
            for b in a + 1..6 {
                let slope = (y[b] - y[a]) / (x0[b] - x0[a]);
                let icpt = y[a] - slope * x0[a];
                let loss: f64 = (0..6)
                    .map(|i| {
                        let r = y[i] - icpt - slope * x0[i];
                        r * (t - if r < 0.0 { 1.0 } else { 0.0 })
                    })
                    .sum();
                if loss < best.0 - 1e-12 {
                    best = (loss, (icpt, slope));
                }
            }
        }
        let (a0, a1) = best.1;
        let z = DMatrix::from_fn(6, 2, |i, c| if c == 0 { 1.0 } else { x0[i] });
        let theta = (z.transpose() * &z)
            .lu()
            .solve(&(z.transpose() * DVector::from_vec(x1.clone())))
            .unwrap();
        let e: Vec<f64> = (0..6).map(|i| x1[i] - theta[0] - theta[1] * x0[i]).collect();
        let s2 = e.iter().map(|v| v * v).sum::<f64>() / 6.0;
        let num = (0..6)
            .map(|i| {
                let r = y[i] - a0 - a1 * x0[i];
                let score = if r.abs() < 1e-12 {
                    t
                } else {
                    t - if r < 0.0 { 1.0 } else { 0.0 }
                };
                score * e[i]
            })
            .sum::<f64>()
            / 6.0;
        let want = num / (t * (1.0 - t) * s2).sqrt();
        assert!((got.value - want).abs() < 1e-10, "{} vs {want}", got.value);
        assert!((got.sigma2 - s2).abs() < 1e-12);
    }

    #[test]
    fn shared_fit_matches_individual_calls() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let ds = random_ds(&mut rng, 60, 8);
        let cond = [0, 5];
        let cands = [1, 2, 3, 4, 6];
        let table = qpc_screen_scores(&ds, &cands, &cond, tau(0.4)).unwrap();
        for j in cands {
            let v = sample_qpc(&ds, j, &cond, tau(0.4)).unwrap();
            assert_eq!(table.scores[&j], v.value.abs());
        }
        let single = qpc_screen_scores(&ds, &[7], &[], tau(0.4)).unwrap();
        assert_eq!(single.scores.len(), 1);
        assert_eq!(single.scores[&7], sample_qpc(&ds, 7, &[], tau(0.4)).unwrap().value.abs());
    }

    #[test]
    fn duplicate_candidates_score_identically() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let base = random_ds(&mut rng, 40, 3);
        let mut cols: Vec<Vec<f64>> = (0..3).map(|j| base.column(j).to_vec()).collect();
        cols.push(cols[1].clone());
        let ds = Dataset::unnamed(base.y().to_vec(), cols).unwrap();
        let table = qpc_screen_scores(&ds, &[1, 3], &[0], tau(0.5)).unwrap();
        assert_eq!(table.scores[&1], table.scores[&3]);
        assert_eq!(table.argmax().unwrap().0, 1);
    }

    #[test]
    fn explained_candidate_is_degenerate_not_fatal() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let base = random_ds(&mut rng, 30, 2);
        let mut cols: Vec<Vec<f64>> = (0..2).map(|j| base.column(j).to_vec()).collect();
        cols.push(cols[0].iter().map(|v| 2.0 * v + 1.0).collect());
        let ds = Dataset::unnamed(base.y().to_vec(), cols).unwrap();
        let table = qpc_screen_scores(&ds, &[1, 2], &[0], tau(0.5)).unwrap();
        assert!(matches!(table.failures[&2], QpcError::DegeneratePredictor { column: 2, .. }));
        assert!(table.scores.contains_key(&1));
    }

    #[test]
    fn bound_and_affine_invariance() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for _ in 0..100 {
            let ds = random_ds(&mut rng, 50, 5);
            let t = rng.random_range(0.05..0.95);
            let k = rng.random_range(0..=3);
            let cond: Vec<usize> = (1..=k).collect();
            let v = sample_qpc(&ds, 0, &cond, tau(t)).unwrap();
            assert!(v.value.abs() <= (t.max(1.0 - t) / t.min(1.0 - t)).sqrt() + 1e-9);

            let (a, b) = (rng.random_range(-3.0..3.0), rng.random_range(0.2..4.0));
            let mut cols: Vec<Vec<f64>> = (0..5).map(|j| ds.column(j).to_vec()).collect();
            cols[0] = cols[0].iter().map(|x| a + b * x).collect();
            let moved = Dataset::unnamed(ds.y().to_vec(), cols.clone()).unwrap();
            let w = sample_qpc(&moved, 0, &cond, tau(t)).unwrap();
            assert!((v.value - w.value).abs() < 1e-8);
            cols[0] = cols[0].iter().map(|x| -x).collect();
            let flipped = Dataset::unnamed(ds.y().to_vec(), cols).unwrap();
            let u = sample_qpc(&flipped, 0, &cond, tau(t)).unwrap();
            assert!((v.value + u.value).abs() < 1e-8);
        }
    }

    #[test]
    fn ties_prefer_smaller_index() {
        assert_eq!(best_of([(4, 1.0), (2, 1.0), (7, 0.5)]), Some((2, 1.0)));
        assert_eq!(best_of([(1, f64::NAN), (3, 0.1)]), Some((3, 0.1)));
        assert_eq!(best_of(Vec::<(usize, f64)>::new()), None);
    }
}
