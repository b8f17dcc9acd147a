use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};

use super::fit::{default_sample_points, estimate_u_fast, fit_curve, CurveFit};
use super::solver::{solve_tally, DEFAULT_TOL};
use super::{scaled_update, EstimationProblem, Tally, VoteSign};
use crate::error::Result;

/// How `û` is obtained.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EstimatorMode {
    /// Golden-section solve for every distinct tally (memoized).
    Exact,
    /// Always use the fitted logarithm, falling back only on domain errors.
    CurveFit,
    /// Use the fit when its error is within [`Estimator::FIT_THRESHOLD`],
    /// otherwise solve exactly.
    #[default]
    Auto,
}

/// Counters describing how estimates were produced.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct EstimatorStats {
    pub exact_solves: u64,
    pub memo_hits: u64,
    pub fast_evals: u64,
    /// Fast-path evaluations that fell back to the solver.
    pub fallbacks: u64,
    /// Tallies with no opposing vote, resolved by the `|û| → ∞` limit.
    pub unanimous: u64,
}

type MemoKey = (u64, u64, VoteSign, bool);

/// Stateful front end to the estimator: caches curve fits per `M` and
/// memoizes exact solves per tally.
#[derive(Clone, Debug, Default)]
pub struct Estimator {
    mode: EstimatorMode,
    fits: BTreeMap<u64, Option<CurveFit>>,
    memo: HashMap<MemoKey, f64>,
    stats: EstimatorStats,
}

impl Estimator {
    /// Largest acceptable fit error (in units of `û`) for [`EstimatorMode::Auto`].
    pub const FIT_THRESHOLD: f64 = 0.05;

    pub fn new(mode: EstimatorMode) -> Self {
        Self {
            mode,
            ..Self::default()
        }
    }

    pub fn with_fit(mode: EstimatorMode, fit: CurveFit) -> Self {
        let mut e = Self::new(mode);
        e.insert_fit(fit);
        e
    }

    pub fn mode(&self) -> EstimatorMode {
        self.mode
    }

    pub fn stats(&self) -> EstimatorStats {
        self.stats
    }

    pub fn insert_fit(&mut self, fit: CurveFit) {
        self.fits.insert(fit.m.to_bits(), Some(fit));
    }

    /// Successful fits built or inserted so far, ordered by `M`.
    pub fn fits(&self) -> Vec<CurveFit> {
        let mut v: Vec<CurveFit> = self.fits.values().flatten().cloned().collect();
        v.sort_by(|a, b| a.m.total_cmp(&b.m));
        v
    }

    /// The fit for `m`, built on first use. `Ok(None)` records a fit that
    /// could not be built (e.g. too few feasible tallies).
    pub fn fit_for(&mut self, m: f64) -> Result<Option<&CurveFit>> {
        let key = m.to_bits();
        if let std::collections::btree_map::Entry::Vacant(e) = self.fits.entry(key) {
            let fit = match fit_curve(m, &default_sample_points(m)) {
                Ok(f) => Some(f),
                Err(crate::Error::Fit(msg)) => {
                    log::info!("no curve fit for M = {m}: {msg}");
                    None
                }
                Err(e) => return Err(e),
            };
            e.insert(fit);
        }
        Ok(self.fits[&key].as_ref())
    }

    fn exact(&mut self, tally: &Tally) -> Result<f64> {
        let key = (
            tally.m.to_bits(),
            tally.m_p.to_bits(),
            tally.sign,
            tally.own_vote,
        );
        if let Some(&u) = self.memo.get(&key) {
            self.stats.memo_hits += 1;
            return Ok(u);
        }
        let u = solve_tally(tally, DEFAULT_TOL)?;
        self.stats.exact_solves += 1;
        self.memo.insert(key, u);
        Ok(u)
    }

    /// `û` for the tally, or `None` for a unanimous tally.
    pub fn estimate_u(&mut self, tally: &Tally) -> Result<Option<f64>> {
        if tally.is_unanimous()? {
            self.stats.unanimous += 1;
            return Ok(None);
        }
        // Fits describe tallies that contain the client's own vote.
        if self.mode == EstimatorMode::Exact || !tally.own_vote {
            return self.exact(tally).map(Some);
        }
        let strict = self.mode == EstimatorMode::CurveFit;
        let fit = match self.fit_for(tally.m)? {
            Some(f) if strict || f.max_fit_error <= Self::FIT_THRESHOLD => f.clone(),
            Some(_) => return self.exact(tally).map(Some),
            None if strict => {
                return Err(crate::Error::Fit(format!(
                    "no curve fit available for M = {}",
                    tally.m
                )))
            }
            None => return self.exact(tally).map(Some),
        };
        let est = estimate_u_fast(&fit, tally.m_p, tally.sign)?;
        self.stats.fast_evals += 1;
        if est.fallback {
            self.stats.fallbacks += 1;
        }
        Ok(Some(est.u))
    }

    /// `clip(α·μ̂)` for the problem.
    pub fn update(&mut self, problem: &EstimationProblem) -> Result<f64> {
        let u = self.estimate_u(&problem.tally)?;
        Ok(scaled_update(u, problem.w_bar, problem.alpha))
    }

    /// The shrink ratio `μ̂/w̄` for a tally (1 for unanimous tallies).
    pub fn ratio(&mut self, tally: &Tally) -> Result<f64> {
        Ok(match self.estimate_u(tally)? {
            Some(u) => super::shrink_ratio(u, tally.sign),
            None => 1.0,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mlpu::{mu_hat, EstimationProblem, Tally};

    #[test]
    fn memoizes_exact_solves() {
        let mut e = Estimator::new(EstimatorMode::Exact);
        let t = Tally::new(10.0, 4.0, VoteSign::Positive, true).unwrap();
        let a = e.estimate_u(&t).unwrap();
        let b = e.estimate_u(&t).unwrap();
        assert_eq!(a, b);
        assert_eq!(e.stats().exact_solves, 1);
        assert_eq!(e.stats().memo_hits, 1);
    }

    #[test]
    fn unanimous_positive_vote_keeps_positive_weight() {
        let mut e = Estimator::new(EstimatorMode::Exact);
        let p = EstimationProblem::from_aggregate(100.0, 1.0, 0.3, 1.25).unwrap();
        let out = e.update(&p).unwrap();
        assert!(out > 0.0);
        assert!((out - 0.375).abs() < 1e-12);
        assert_eq!(e.stats().unanimous, 1);
    }

    #[test]
    fn balanced_tally_shrinks_weight() {
        let mut e = Estimator::new(EstimatorMode::Exact);
        for w in [0.9, -0.9, 0.2, -0.05] {
            let p = EstimationProblem::from_aggregate(100.0, 0.0, w, 1.01).unwrap();
            let out = e.update(&p).unwrap();
            assert!(out.abs() < w.abs(), "{w} -> {out}");
        }
    }

    #[test]
    fn estimator_symmetry() {
        let mut e = Estimator::new(EstimatorMode::Exact);
        for k in 1..10 {
            let w = 0.37;
            let a = e
                .update(
                    &EstimationProblem::new(
                        Tally::new(10.0, k as f64, VoteSign::Positive, true).unwrap(),
                        w,
                        1.25,
                    )
                    .unwrap(),
                )
                .unwrap();
            let b = e
                .update(
                    &EstimationProblem::new(
                        Tally::new(10.0, 10.0 - k as f64, VoteSign::Negative, true).unwrap(),
                        -w,
                        1.25,
                    )
                    .unwrap(),
                )
                .unwrap();
            assert!((a + b).abs() <= 2.0 * 1e-6);
        }
    }

    #[test]
    fn auto_falls_back_to_exact_when_fit_is_poor() {
        let mut auto = Estimator::new(EstimatorMode::Auto);
        let mut exact = Estimator::new(EstimatorMode::Exact);
        let t = Tally::new(100.0, 30.0, VoteSign::Positive, true).unwrap();
        let fit_ok = auto
            .fit_for(100.0)
            .unwrap()
            .map(|f| f.max_fit_error <= Estimator::FIT_THRESHOLD)
            .unwrap_or(false);
        let a = auto.estimate_u(&t).unwrap().unwrap();
        let b = exact.estimate_u(&t).unwrap().unwrap();
        if fit_ok {
            assert!((a - b).abs() <= Estimator::FIT_THRESHOLD + 1e-3);
        } else {
            assert_eq!(a, b);
        }
    }

    #[test]
    fn update_weight_matches_mu_hat() {
        let mut e = Estimator::new(EstimatorMode::Exact);
        let t = Tally::new(50.0, 20.0, VoteSign::Negative, true).unwrap();
        let u = e.estimate_u(&t).unwrap().unwrap();
        let p = EstimationProblem::new(t, -0.4, 1.5).unwrap();
        assert_eq!(
            e.update(&p).unwrap(),
            (1.5 * mu_hat(u, -0.4)).clamp(-1.0, 1.0)
        );
    }

    #[test]
    fn tiny_m_has_no_fit() {
        let mut e = Estimator::new(EstimatorMode::Auto);
        assert!(e.fit_for(2.0).unwrap().is_none());
        let t = Tally::new(2.0, 1.0, VoteSign::Positive, true).unwrap();
        assert!(e.estimate_u(&t).unwrap().is_some());
    }
}
