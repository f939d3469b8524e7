//! Forward QPC screening (with and without confounder augmentation), EBIC
//! prefix selection and the final refit.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{QpcError, Result};
use crate::kernels::{dot, mean_var, standardize, Dataset, DEGENERATE_VAR};
use crate::qpc::{best_of, Conditioned};
use crate::quantreg::{lambda_path_capped, qr_fit, QrFit, QuantileLevel};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Algorithm {
    /// Conditions each candidate on the selected set plus its most
    /// correlated other columns for the first `d_star` steps.
    Qpcs,
    /// Conditions only on the variables selected so far.
    Qpcfr,
}

impl Algorithm {
    pub fn label(self) -> &'static str {
        match self {
            Algorithm::Qpcs => "QPCS",
            Algorithm::Qpcfr => "QPCFR",
        }
    }
}

/// Where a candidate's confounders may come from.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ConfoundingMode {
    /// Any column outside the selected set (other than the candidate).
    #[default]
    Complement,
    /// Only columns already in the selected set, which adds nothing beyond
    /// the selected set itself. Kept for comparison.
    Literal,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScreenConfig {
    pub tau: QuantileLevel,
    pub algorithm: Algorithm,
    pub d_star: usize,
    pub m_cap: usize,
    pub d_max: usize,
    pub confounding: ConfoundingMode,
    /// Standardize predictor columns before screening.
    pub standardize: bool,
}

/// `floor(n / ln n)`.
pub fn default_d_max(n: usize) -> usize {
    let nf = n as f64;
    (nf / nf.ln()).floor() as usize
}

/// `floor(sqrt(n / ln n))`; also the default confounder cap.
pub fn default_d_star(n: usize) -> usize {
    let nf = n as f64;
    (nf / nf.ln()).sqrt().floor() as usize
}

impl ScreenConfig {
    /// Default tuning for `n` observations and `p` predictors. The step
    /// budget never exceeds the number of predictors.
    pub fn new(n: usize, p: usize, tau: QuantileLevel, algorithm: Algorithm) -> Self {
        let d_max = default_d_max(n).min(p).max(1);
        Self {
            tau,
            algorithm,
            d_star: default_d_star(n).clamp(1, d_max),
            m_cap: default_d_star(n),
            d_max,
            confounding: ConfoundingMode::Complement,
            standardize: false,
        }
    }

    pub fn validate(&self, n: usize) -> Result<()> {
        if self.d_star < 1 || self.d_star > self.d_max {
            return Err(QpcError::InvalidArgument(format!(
                "d_star = {} must lie in [1, d_max = {}]",
                self.d_star, self.d_max
            )));
        }
        if self.d_max + 1 >= n {
            return Err(QpcError::InvalidArgument(format!(
                "d_max = {} too large for n = {n}",
                self.d_max
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Step {
    pub index: usize,
    pub name: String,
    /// |QPC| of the selected column when it was picked.
    pub score: f64,
    /// Conditioning set its score was computed against (intercept implicit).
    pub conditioning: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidateFailure {
    pub step: usize,
    pub candidate: usize,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionTrace {
    pub algorithm: Algorithm,
    pub tau: QuantileLevel,
    pub steps: Vec<Step>,
    /// Mean check loss of the refit on each prefix `D = 1..=steps.len()`.
    pub prefix_loss: Vec<f64>,
    /// EBIC per prefix; infinite when the prefix interpolates the data or its
    /// refit failed.
    pub ebic: Vec<f64>,
    pub chosen_d: usize,
    pub final_fit: QrFit,
    pub failures: Vec<CandidateFailure>,
    /// Step at which every remaining candidate failed, if that happened.
    pub stalled_at: Option<usize>,
}

impl SelectionTrace {
    pub fn selected(&self) -> Vec<usize> {
        self.steps.iter().map(|s| s.index).collect()
    }

    /// The first `chosen_d` selected indices.
    pub fn chosen(&self) -> Vec<usize> {
        self.steps[..self.chosen_d].iter().map(|s| s.index).collect()
    }
}

/// Loss at or below which a prefix is treated as interpolating.
pub const MIN_LOSS: f64 = 1e-300;

/// `ln(loss) + D (ln n / 2n) ln D`.
pub fn ebic(mean_check_loss: f64, d: usize, n: usize) -> Result<f64> {
    if !(mean_check_loss > MIN_LOSS) {
        return Err(QpcError::NonPositiveLoss {
            loss: mean_check_loss,
        });
    }
    if d == 0 || n < 2 {
        return Err(QpcError::InvalidArgument("ebic needs D >= 1 and n >= 2".into()));
    }
    let (df, nf) = (d as f64, n as f64);
    Ok(mean_check_loss.ln() + df * (nf.ln() / (2.0 * nf)) * df.ln())
}

/// Position of the smallest value; ties go to the earliest.
fn argmin_first(values: &[f64]) -> Option<usize> {
    let mut best: Option<(usize, f64)> = None;
    for (i, &v) in values.iter().enumerate() {
        if best.is_none_or(|(_, b)| v < b) {
            best = Some((i, v));
        }
    }
    best.map(|(i, _)| i)
}

/// Standardized columns; `None` for columns without variance.
fn z_scores(ds: &Dataset) -> Vec<Option<Vec<f64>>> {
    (0..ds.p())
        .map(|j| {
            let col = ds.column(j);
            let (m, v) = mean_var(col);
            (v > DEGENERATE_VAR).then(|| {
                let sd = v.sqrt();
                col.iter().map(|x| (x - m) / sd).collect()
            })
        })
        .collect()
}

/// Columns ranked by |correlation| with column `j`, best first, ties by
/// index; degenerate columns are left out.
fn ranked_neighbors(z: &[Option<Vec<f64>>], j: usize, keep: usize) -> Vec<usize> {
    let Some(zj) = &z[j] else {
        return Vec::new();
    };
    let n = zj.len() as f64;
    let mut all: Vec<(f64, usize)> = z
        .iter()
        .enumerate()
        .filter(|&(k, _)| k != j)
        .filter_map(|(k, zk)| zk.as_ref().map(|zk| ((dot(zj, zk) / n).clamp(-1.0, 1.0).abs(), k)))
        .collect();
    let cmp = |a: &(f64, usize), b: &(f64, usize)| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1));
    if keep < all.len() {
        all.select_nth_unstable_by(keep, cmp);
        all.truncate(keep);
    }
    all.sort_by(cmp);
    all.into_iter().map(|(_, k)| k).collect()
}

/// The `m` columns most correlated (in absolute value) with column `j`,
/// among those not in `excluded`; ties go to the smaller index. Columns
/// without variance are never confounders.
pub fn confounding_set(ds: &Dataset, j: usize, excluded: &[usize], m: usize) -> Result<Vec<usize>> {
    if j >= ds.p() {
        return Err(QpcError::InvalidArgument(format!("column {j} out of range")));
    }
    let (_, v) = mean_var(ds.column(j));
    if v <= DEGENERATE_VAR {
        return Err(QpcError::DegenerateColumn { column: j });
    }
    let z = z_scores(ds);
    Ok(pick_confounders(&ranked_neighbors(&z, j, ds.p()), excluded, m))
}

fn pick_confounders(ranked: &[usize], excluded: &[usize], m: usize) -> Vec<usize> {
    ranked.iter().copied().filter(|k| !excluded.contains(k)).take(m).collect()
}

struct Scored {
    index: usize,
    score: f64,
    conditioning: Vec<usize>,
}

/// Scores every candidate against its own conditioning set. Failures are
/// returned separately, in candidate order.
fn score_each(
    ds: &Dataset,
    tau: QuantileLevel,
    candidates: &[usize],
    cond_of: impl Fn(usize) -> Vec<usize> + Sync,
) -> (Vec<Scored>, Vec<(usize, QpcError)>) {
    let results: Vec<(usize, Vec<usize>, Result<f64>)> = candidates
        .par_iter()
        .map(|&j| {
            let cond = cond_of(j);
            let r = Conditioned::new(ds, &cond, tau)
                .and_then(|c| c.qpc(ds, j, tau))
                .map(|v| v.value.abs());
            (j, cond, r)
        })
        .collect();
    let mut ok = Vec::new();
    let mut bad = Vec::new();
    for (j, cond, r) in results {
        match r {
            Ok(score) => ok.push(Scored {
                index: j,
                score,
                conditioning: cond,
            }),
            Err(e) => bad.push((j, e)),
        }
    }
    (ok, bad)
}

struct Builder<'a> {
    ds: &'a Dataset,
    steps: Vec<Step>,
    failures: Vec<CandidateFailure>,
    stalled_at: Option<usize>,
}

impl Builder<'_> {
    fn selected(&self) -> Vec<usize> {
        self.steps.iter().map(|s| s.index).collect()
    }

    fn remaining(&self) -> Vec<usize> {
        let sel = self.selected();
        (0..self.ds.p()).filter(|j| !sel.contains(j)).collect()
    }

    fn record_failures(&mut self, step: usize, bad: Vec<(usize, QpcError)>) {
        self.failures.extend(bad.into_iter().map(|(candidate, e)| CandidateFailure {
            step,
            candidate,
            reason: e.to_string(),
        }));
    }

    /// Picks the best scored candidate; false when there is none.
    fn take_best(&mut self, scored: Vec<Scored>) -> bool {
        let Some((j, _)) = best_of(scored.iter().map(|s| (s.index, s.score))) else {
            self.stalled_at = Some(self.steps.len() + 1);
            return false;
        };
        let pick = scored.into_iter().find(|s| s.index == j).expect("argmax is a member");
        self.steps.push(Step {
            index: pick.index,
            name: self.ds.name(pick.index).to_string(),
            score: pick.score,
            conditioning: pick.conditioning,
        });
        true
    }
}

fn run_qpcfr<'a>(ds: &'a Dataset, cfg: &ScreenConfig) -> Builder<'a> {
    let mut b = Builder {
        ds,
        steps: Vec::new(),
        failures: Vec::new(),
        stalled_at: None,
    };
    while b.steps.len() < cfg.d_max {
        let step = b.steps.len() + 1;
        let cond = b.selected();
        let cands = b.remaining();
        if cands.is_empty() {
            break;
        }
        let shared = match Conditioned::new(ds, &cond, cfg.tau) {
            Ok(c) => c,
            Err(e) => {
                b.record_failures(step, cands.iter().map(|&j| (j, e.clone())).collect());
                b.stalled_at = Some(step);
                break;
            }
        };
        let results: Vec<(usize, Result<f64>)> = cands
            .par_iter()
            .map(|&j| (j, shared.qpc(ds, j, cfg.tau).map(|v| v.value.abs())))
            .collect();
        let mut ok = Vec::new();
        let mut bad = Vec::new();
        for (j, r) in results {
            match r {
                Ok(score) => ok.push(Scored {
                    index: j,
                    score,
                    conditioning: cond.clone(),
                }),
                Err(e) => bad.push((j, e)),
            }
        }
        b.record_failures(step, bad);
        if !b.take_best(ok) {
            break;
        }
    }
    b
}

fn run_qpcs<'a>(ds: &'a Dataset, cfg: &ScreenConfig) -> Builder<'a> {
    let mut b = Builder {
        ds,
        steps: Vec::new(),
        failures: Vec::new(),
        stalled_at: None,
    };
    let z = z_scores(ds);
    // exclusions never exceed d_star - 1 columns, so this many neighbours
    // always leave m_cap eligible ones
    let keep = cfg.m_cap + cfg.d_star;
    let neighbors: Vec<Vec<usize>> = match cfg.confounding {
        ConfoundingMode::Complement => (0..ds.p())
            .into_par_iter()
            .map(|j| ranked_neighbors(&z, j, keep))
            .collect(),
        ConfoundingMode::Literal => vec![Vec::new(); ds.p()],
    };
    let augmented = |base: &[usize], j: usize| -> Vec<usize> {
        let mut cond = base.to_vec();
        cond.extend(pick_confounders(&neighbors[j], base, cfg.m_cap));
        cond
    };

    while b.steps.len() < cfg.d_star.min(cfg.d_max) {
        let step = b.steps.len() + 1;
        let base = b.selected();
        let cands = b.remaining();
        if cands.is_empty() {
            break;
        }
        let (ok, bad) = score_each(ds, cfg.tau, &cands, |j| augmented(&base, j));
        b.record_failures(step, bad);
        if !b.take_best(ok) {
            return b;
        }
    }

    if b.steps.len() < cfg.d_max && b.stalled_at.is_none() {
        // Later steps condition on the set as it stood entering step d_star,
        // so each remaining candidate's score is fixed: compute once, then
        // take candidates in score order.
        let frozen: Vec<usize> = b.steps[..(cfg.d_star - 1).min(b.steps.len())]
            .iter()
            .map(|s| s.index)
            .collect();
        let cands = b.remaining();
        let step = b.steps.len() + 1;
        let (mut ok, bad) = score_each(ds, cfg.tau, &cands, |j| augmented(&frozen, j));
        b.record_failures(step, bad);
        ok.retain(|s| !s.score.is_nan());
        ok.sort_by(|a, c| c.score.total_cmp(&a.score).then(a.index.cmp(&c.index)));
        let mut it = ok.into_iter();
        while b.steps.len() < cfg.d_max {
            let Some(s) = it.next() else {
                if !b.remaining().is_empty() {
                    b.stalled_at = Some(b.steps.len() + 1);
                }
                break;
            };
            b.steps.push(Step {
                index: s.index,
                name: ds.name(s.index).to_string(),
                score: s.score,
                conditioning: s.conditioning,
            });
        }
    }
    b
}

/// Runs the configured screening algorithm, scores every prefix of the
/// selection path by EBIC and refits the chosen prefix.
pub fn screen(ds: &Dataset, cfg: &ScreenConfig) -> Result<SelectionTrace> {
    cfg.validate(ds.n())?;
    if cfg.standardize {
        let (z, _) = standardize(ds)?;
        return screen(&z, &ScreenConfig { standardize: false, ..*cfg });
    }
    let b = match cfg.algorithm {
        Algorithm::Qpcs => run_qpcs(ds, cfg),
        Algorithm::Qpcfr => run_qpcfr(ds, cfg),
    };
    if b.steps.is_empty() {
        return Err(QpcError::StalledSelection { step: 1 });
    }
    let selected = b.selected();
    let n = ds.n();
    let fits: Vec<Result<QrFit>> = (1..=selected.len())
        .into_par_iter()
        .map(|d| qr_fit(ds.y(), &ds.columns_at(&selected[..d]), cfg.tau))
        .collect();
    let t = cfg.tau.value();
    let prefix_loss: Vec<f64> = fits
        .iter()
        .map(|f| f.as_ref().map_or(f64::NAN, |f| f.mean_check_loss(t)))
        .collect();
    let ebic_values: Vec<f64> = prefix_loss
        .iter()
        .enumerate()
        .map(|(i, &l)| ebic(l, i + 1, n).unwrap_or(f64::INFINITY))
        .collect();
    let chosen_d = argmin_first(&ebic_values).expect("non-empty path") + 1;
    let final_fit = fits
        .into_iter()
        .nth(chosen_d - 1)
        .expect("chosen prefix exists")?;
    Ok(SelectionTrace {
        algorithm: cfg.algorithm,
        tau: cfg.tau,
        steps: b.steps,
        prefix_loss,
        ebic: ebic_values,
        chosen_d,
        final_fit,
        failures: b.failures,
        stalled_at: b.stalled_at,
    })
}

pub fn qpcs_run(ds: &Dataset, cfg: &ScreenConfig) -> Result<SelectionTrace> {
    screen(ds, &ScreenConfig { algorithm: Algorithm::Qpcs, ..*cfg })
}

pub fn qpcfr_run(ds: &Dataset, cfg: &ScreenConfig) -> Result<SelectionTrace> {
    screen(ds, &ScreenConfig { algorithm: Algorithm::Qpcfr, ..*cfg })
}

/// The first `chosen_d` indices of the trace and the quantile regression
/// refitted on them.
pub fn select_two_step(
    trace: &SelectionTrace,
    ds: &Dataset,
    tau: QuantileLevel,
) -> Result<(Vec<usize>, QrFit)> {
    if trace.steps.is_empty() {
        return Err(QpcError::InvalidArgument("empty selection trace".into()));
    }
    let d = trace.chosen_d.clamp(1, trace.steps.len());
    let chosen: Vec<usize> = trace.steps[..d].iter().map(|s| s.index).collect();
    let fit = qr_fit(ds.y(), &ds.columns_at(&chosen), tau)?;
    Ok((chosen, fit))
}

/// Chosen prefix length for an EBIC curve (smallest `D` on ties).
pub fn choose_d(ebic_values: &[f64]) -> Option<usize> {
    argmin_first(ebic_values).map(|i| i + 1)
}

/// Outcome of choosing a penalty on the l1 path by EBIC.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct L1Selection {
    pub lambda: f64,
    /// Columns with nonzero slope at the chosen penalty, in index order.
    pub selected: Vec<usize>,
    /// The penalized fit itself (one slope per column); it is not refitted.
    pub fit: QrFit,
    pub lambdas: Vec<f64>,
    pub active: Vec<usize>,
    /// EBIC per path point; infinite where the active set is empty or larger
    /// than `d_max`.
    pub ebic: Vec<f64>,
}

/// Walks the penalty path from `lambda_max` down (stopping once more than
/// `d_max` slopes are active) and keeps the fit minimizing EBIC over
/// `1 <= D <= d_max`, with `D` the number of nonzero slopes. Ties keep the
/// larger penalty. If no path point qualifies the null fit is returned.
pub fn l1_select(ds: &Dataset, tau: QuantileLevel, d_max: usize, grid_size: usize) -> Result<L1Selection> {
    let cols = ds.columns_at(&(0..ds.p()).collect::<Vec<_>>());
    let path = lambda_path_capped(ds.y(), &cols, tau, grid_size, Some(d_max))?;
    let t = tau.value();
    let n = ds.n();
    let ebic_values: Vec<f64> = path
        .fits
        .iter()
        .zip(&path.active)
        .map(|(f, &d)| {
            if d == 0 || d > d_max {
                f64::INFINITY
            } else {
                ebic(f.mean_check_loss(t), d, n).unwrap_or(f64::INFINITY)
            }
        })
        .collect();
    let k = argmin_first(&ebic_values)
        .filter(|&k| ebic_values[k].is_finite())
        .unwrap_or(0);
    let fit = path.fits[k].clone();
    Ok(L1Selection {
        lambda: path.lambdas[k],
        selected: fit.active_set(),
        fit,
        lambdas: path.lambdas,
        active: path.active,
        ebic: ebic_values,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernels::pearson_corr;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    fn tau(t: f64) -> QuantileLevel {
        QuantileLevel::new(t).unwrap()
    }

    fn normals(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
        (0..n).map(|_| rng.sample(StandardNormal)).collect()
    }

    #[test]
    fn tuning_defaults_for_200() {
        assert_eq!(default_d_star(200), 6);
        assert_eq!(default_d_max(200), 37);
        let cfg = ScreenConfig::new(200, 1000, tau(0.5), Algorithm::Qpcs);
        assert_eq!((cfg.d_star, cfg.m_cap, cfg.d_max), (6, 6, 37));
        let small = ScreenConfig::new(20, 5, tau(0.5), Algorithm::Qpcfr);
        assert_eq!(small.d_max, 5);
    }

    #[test]
    fn ebic_values() {
        assert_eq!(ebic(0.7, 1, 100).unwrap(), 0.7f64.ln());
        let want = 2.0 * (100f64.ln() / 200.0) * 2f64.ln();
        assert!((ebic(1.0, 2, 100).unwrap() - want).abs() < 1e-15);
        let pens: Vec<f64> = (1..10).map(|d| ebic(1.0, d, 50).unwrap()).collect();
        assert!(pens.windows(2).all(|w| w[0] < w[1]));
        assert!(matches!(ebic(0.0, 3, 50), Err(QpcError::NonPositiveLoss { .. })));
    }

    #[test]
    fn ebic_ties_prefer_fewer_variables() {
        assert_eq!(choose_d(&[0.5, 0.2, 0.2, 0.9]), Some(2));
        assert_eq!(choose_d(&[1.0, 0.4, 0.1, 0.3]), Some(3));
        assert_eq!(choose_d(&[f64::INFINITY, 2.0]), Some(2));
    }

    #[test]
    fn confounding_set_ranking() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let x1 = normals(&mut rng, 100);
        let x2: Vec<f64> = x1.iter().map(|v| v + 1e-3 * rng.sample::<f64, _>(StandardNormal)).collect();
        let x3 = normals(&mut rng, 100);
        let y = normals(&mut rng, 100);
        assert!(pearson_corr(&x1, &x2).unwrap().abs() > pearson_corr(&x1, &x3).unwrap().abs());
        let ds = Dataset::unnamed(y, vec![x1, x2, x3]).unwrap();
        assert_eq!(confounding_set(&ds, 0, &[], 1).unwrap(), vec![1]);
        assert!(confounding_set(&ds, 0, &[], 0).unwrap().is_empty());
        assert!(confounding_set(&ds, 0, &[1, 2], 3).unwrap().is_empty());
        assert_eq!(confounding_set(&ds, 0, &[1], 5).unwrap(), vec![2]);
    }

    #[test]
    fn confounding_ties_prefer_smaller_index() {
        let a = vec![1.0, 2.0, 3.0, 4.0, 6.0];
        let ds = Dataset::unnamed(vec![0.0, 1.0, 0.0, 1.0, 0.0], vec![a.clone(), a.clone(), a.clone(), a])
            .unwrap();
        assert_eq!(confounding_set(&ds, 2, &[], 2).unwrap(), vec![0, 1]);
    }

    fn informative(n: usize, p: usize, seed: u64) -> Dataset {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let cols: Vec<Vec<f64>> = (0..p).map(|_| normals(&mut rng, n)).collect();
        let y = (0..n)
            .map(|i| 1.5 * cols[3][i] + rng.sample::<f64, _>(StandardNormal))
            .collect();
        Dataset::unnamed(y, cols).unwrap()
    }

    #[test]
    fn first_step_finds_the_signal() {
        let ds = informative(500, 11, 9);
        for alg in [Algorithm::Qpcs, Algorithm::Qpcfr] {
            let trace = screen(&ds, &ScreenConfig::new(500, 11, tau(0.5), alg)).unwrap();
            assert_eq!(trace.steps[0].index, 3);
        }
    }

    #[test]
    fn single_predictor_path() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = normals(&mut rng, 30);
        let y = normals(&mut rng, 30);
        let ds = Dataset::unnamed(y, vec![x]).unwrap();
        let trace = screen(&ds, &ScreenConfig::new(30, 1, tau(0.5), Algorithm::Qpcs)).unwrap();
        assert_eq!(trace.steps.len(), 1);
        assert_eq!(trace.chosen_d, 1);
    }

    #[test]
    fn qpcfr_conditions_on_previous_picks() {
        let ds = informative(80, 12, 4);
        let trace = qpcfr_run(&ds, &ScreenConfig::new(80, 12, tau(0.3), Algorithm::Qpcfr)).unwrap();
        let sel = trace.selected();
        for (d, s) in trace.steps.iter().enumerate() {
            assert_eq!(s.conditioning, sel[..d].to_vec());
        }
        let mut uniq = sel.clone();
        uniq.sort_unstable();
        uniq.dedup();
        assert_eq!(uniq.len(), sel.len());
    }

    #[test]
    fn without_augmentation_both_algorithms_agree() {
        let ds = informative(60, 9, 5);
        let mut cfg = ScreenConfig::new(60, 9, tau(0.5), Algorithm::Qpcs);
        cfg.m_cap = 0;
        cfg.d_star = cfg.d_max;
        let a = qpcs_run(&ds, &cfg).unwrap();
        let b = qpcfr_run(&ds, &cfg).unwrap();
        assert_eq!(a.selected(), b.selected());
        assert_eq!(a.ebic, b.ebic);

        let mut lit = ScreenConfig::new(60, 9, tau(0.5), Algorithm::Qpcs);
        lit.confounding = ConfoundingMode::Literal;
        lit.d_star = lit.d_max;
        assert_eq!(qpcs_run(&ds, &lit).unwrap().selected(), b.selected());
    }

    #[test]
    fn runs_are_deterministic_and_nested() {
        let ds = informative(70, 15, 6);
        let cfg = ScreenConfig::new(70, 15, tau(0.7), Algorithm::Qpcs);
        let a = screen(&ds, &cfg).unwrap();
        let b = screen(&ds, &cfg).unwrap();
        assert_eq!(a, b);
        let (chosen, fit) = select_two_step(&a, &ds, cfg.tau).unwrap();
        assert_eq!(chosen, a.selected()[..a.chosen_d].to_vec());
        assert_eq!(fit, a.final_fit);
        for (d, e) in a.ebic.iter().enumerate() {
            let f = qr_fit(ds.y(), &ds.columns_at(&a.selected()[..=d]), cfg.tau).unwrap();
            assert_eq!(*e, ebic(f.mean_check_loss(0.7), d + 1, 70).unwrap());
        }
    }

    #[test]
    fn constant_column_is_skipped_not_fatal() {
        let mut ds = informative(20, 5, 2);
        let mut cols: Vec<Vec<f64>> = (0..5).map(|j| ds.column(j).to_vec()).collect();
        cols[1] = vec![2.0; 20];
        ds = Dataset::unnamed(ds.y().to_vec(), cols).unwrap();
        for alg in [Algorithm::Qpcs, Algorithm::Qpcfr] {
            let trace = screen(&ds, &ScreenConfig::new(20, 5, tau(0.5), alg)).unwrap();
            assert!(!trace.selected().contains(&1));
            assert!(trace.failures.iter().any(|f| f.candidate == 1));
            assert_eq!(trace.stalled_at, Some(5));
            assert_eq!(trace.steps.len(), 4);
        }
    }

    #[test]
    fn l1_selection_uses_ebic_over_the_path() {
        let ds = informative(60, 20, 8);
        let sel = l1_select(&ds, tau(0.5), 10, 12).unwrap();
        let k = sel.lambdas.iter().position(|&l| l == sel.lambda).unwrap();
        assert_eq!(sel.active[k], sel.selected.len());
        assert!(sel.ebic.iter().all(|&e| e >= sel.ebic[k]));
        assert!(sel.selected.contains(&3));
        assert_eq!(sel.fit.beta.len(), 21);
    }

    #[test]
    fn invalid_tuning_is_rejected() {
        let ds = informative(20, 5, 2);
        let mut cfg = ScreenConfig::new(20, 5, tau(0.5), Algorithm::Qpcs);
        cfg.d_star = 0;
        assert!(screen(&ds, &cfg).is_err());
        cfg.d_star = 1;
        cfg.d_max = 19;
        assert!(screen(&ds, &cfg).is_err());
    }
}
