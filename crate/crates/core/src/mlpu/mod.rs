//! Maximum-likelihood parameter updating.
//!
//! Treat the auxiliary weights of one parameter across clients as draws from
//! `N(μ, σ²)`. Each client sees the number `M_P` of `+1` votes among those
//! draws plus its own real value `w̄`. Write `u = μ/σ`. The reduced
//! log-likelihood in `u` is maximized numerically, which gives the estimate
//! `μ̂ = û·w̄/v̂` of the population mean. A client then updates
//! `w̄ ← clip(α·μ̂)` with a constant `α > 1` that compensates for the
//! shrinkage of the estimate.

mod estimator;
mod fit;
mod probe;
mod solver;

pub use estimator::{Estimator, EstimatorMode, EstimatorStats};
pub use fit::{
    default_sample_points, estimate_u_fast, fit_curve, read_fit_cache, write_fit_cache, CurveFit,
    FastEstimate,
};
pub use probe::{best_alpha, bias_probe, contraction_audit, BiasRow, ContractionAudit};
pub use solver::{solve_tally, solve_u, COARSE_STEP, DEFAULT_TOL, U_MAX};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Default scaling constant for MNIST-scale runs.
pub const DEFAULT_ALPHA: f64 = 1.25;

/// Slack for count-feasibility checks on real-valued tallies.
pub(crate) const COUNT_SLACK: f64 = 1e-9;

/// Sign of the local auxiliary weight. Zero counts as negative, matching
/// the binarization rule.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum VoteSign {
    Positive,
    Negative,
}

impl VoteSign {
    pub fn of(w: f64) -> Self {
        if w > 0.0 {
            VoteSign::Positive
        } else {
            VoteSign::Negative
        }
    }

    pub fn value(self) -> f64 {
        match self {
            VoteSign::Positive => 1.0,
            VoteSign::Negative => -1.0,
        }
    }

    pub fn flip(self) -> Self {
        match self {
            VoteSign::Positive => VoteSign::Negative,
            VoteSign::Negative => VoteSign::Positive,
        }
    }
}

/// The vote seen by one client for one parameter.
///
/// `own_vote` records whether the client's own binary upload is part of the
/// tally. It is true in every round without partial participation.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Tally {
    pub m: f64,
    pub m_p: f64,
    pub sign: VoteSign,
    pub own_vote: bool,
}

impl Tally {
    pub fn new(m: f64, m_p: f64, sign: VoteSign, own_vote: bool) -> Result<Self> {
        let t = Self {
            m,
            m_p,
            sign,
            own_vote,
        };
        t.coefficients()?;
        Ok(t)
    }

    /// Coefficients of `ln(1 − z(u))` and `ln z(u)` in the objective: the
    /// `+1` and `−1` vote counts excluding the client's own vote.
    pub fn coefficients(&self) -> Result<(f64, f64)> {
        if !(self.m.is_finite() && self.m >= 1.0 - COUNT_SLACK) {
            return Err(Error::Domain(format!(
                "client count M = {} must be >= 1",
                self.m
            )));
        }
        if !(self.m_p.is_finite() && self.m_p >= -COUNT_SLACK && self.m_p <= self.m + COUNT_SLACK) {
            return Err(Error::Domain(format!(
                "M_P = {} outside [0, M = {}]",
                self.m_p, self.m
            )));
        }
        let (own_pos, own_neg) = match (self.own_vote, self.sign) {
            (false, _) => (0.0, 0.0),
            (true, VoteSign::Positive) => (1.0, 0.0),
            (true, VoteSign::Negative) => (0.0, 1.0),
        };
        let pos = self.m_p - own_pos;
        let neg = self.m - self.m_p - own_neg;
        if pos < -COUNT_SLACK || neg < -COUNT_SLACK {
            return Err(Error::Domain(format!(
                "tally (M = {}, M_P = {}) cannot contain the local {:?} vote",
                self.m, self.m_p, self.sign
            )));
        }
        Ok((pos.max(0.0), neg.max(0.0)))
    }

    /// True when no other client voted against the local sign. The
    /// objective then increases without bound in the direction of the sign,
    /// and the estimate is taken in the limit `|û| → ∞`, where `μ̂ → w̄`.
    pub fn is_unanimous(&self) -> Result<bool> {
        let (pos, neg) = self.coefficients()?;
        Ok(match self.sign {
            VoteSign::Positive => neg <= COUNT_SLACK,
            VoteSign::Negative => pos <= COUNT_SLACK,
        })
    }

    /// The same tally seen by a client with the opposite sign:
    /// `(M, M − M_P, −sign)`.
    pub fn mirrored(&self) -> Self {
        Self {
            m: self.m,
            m_p: self.m - self.m_p,
            sign: self.sign.flip(),
            own_vote: self.own_vote,
        }
    }
}

/// A single estimation: tally, local weight and scaling constant.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EstimationProblem {
    pub tally: Tally,
    pub w_bar: f64,
    pub alpha: f64,
}

impl EstimationProblem {
    /// Builds a problem for a client that voted `Sign(w̄)` in a tally of `m`
    /// votes with mean `w_tilde`.
    pub fn from_aggregate(m: f64, w_tilde: f64, w_bar: f64, alpha: f64) -> Result<Self> {
        let m_p = count_positive(w_tilde, m)?;
        Self::new(Tally::new(m, m_p, VoteSign::of(w_bar), true)?, w_bar, alpha)
    }

    pub fn new(tally: Tally, w_bar: f64, alpha: f64) -> Result<Self> {
        if !(w_bar.is_finite() && (-1.0..=1.0).contains(&w_bar)) {
            return Err(Error::Range(format!("w̄ = {w_bar} outside [-1, 1]")));
        }
        if tally.sign != VoteSign::of(w_bar) {
            return Err(Error::Domain("tally sign does not match Sign(w̄)".into()));
        }
        if !(alpha.is_finite() && alpha > 0.0) {
            return Err(Error::Config(format!("α = {alpha} must be positive")));
        }
        tally.coefficients()?;
        Ok(Self {
            tally,
            w_bar,
            alpha,
        })
    }
}

/// Number of `+1` votes implied by an aggregate mean `w̃` of `m` votes.
pub fn count_positive(w_tilde: f64, m: f64) -> Result<f64> {
    if !(w_tilde.is_finite() && w_tilde.abs() <= 1.0) {
        return Err(Error::Range(format!(
            "aggregate w̃ = {w_tilde} outside [-1, 1]"
        )));
    }
    if !(m.is_finite() && m >= 1.0) {
        return Err(Error::Domain(format!("client count M = {m} must be >= 1")));
    }
    Ok((w_tilde + 1.0) * m / 2.0)
}

/// Standard normal survival function `P(X > a)`, accurate in both tails.
pub fn survival_z(a: f64) -> f64 {
    0.5 * libm::erfc(a / std::f64::consts::SQRT_2)
}

/// `ln z(a)` without underflow for large positive `a`.
pub fn log_survival(a: f64) -> f64 {
    if a < 30.0 {
        survival_z(a).ln()
    } else {
        // Asymptotic series of the Mills ratio.
        let a2 = a * a;
        let series = 1.0 - 1.0 / a2 + 3.0 / (a2 * a2) - 15.0 / (a2 * a2 * a2);
        -0.5 * a2 - a.ln() - 0.5 * (2.0 * std::f64::consts::PI).ln() + series.ln()
    }
}

/// `r ± s·u` with `r = √(u² + 4)`, evaluated without cancellation.
/// Returns `(r + s·u, r − s·u)`; their product is exactly 4 in exact arithmetic.
fn radical_pair(u: f64, s: f64) -> (f64, f64) {
    let r = (u * u + 4.0).sqrt();
    let su = s * u;
    if su >= 0.0 {
        let plus = r + su;
        (plus, 4.0 / plus)
    } else {
        let minus = r - su;
        (4.0 / minus, minus)
    }
}

/// Reduced log-likelihood in `u` for a tally.
pub fn objective(u: f64, tally: &Tally) -> Result<f64> {
    let (pos, neg) = tally.coefficients()?;
    Ok(objective_with(u, pos, neg, tally.sign.value()))
}

#[inline]
pub(crate) fn objective_with(u: f64, pos: f64, neg: f64, s: f64) -> f64 {
    let (plus, minus) = radical_pair(u, s);
    let mut f = -std::f64::consts::LN_2 + plus.ln() - minus * minus / 8.0;
    if pos > 0.0 {
        f += pos * log_survival(-u);
    }
    if neg > 0.0 {
        f += neg * log_survival(u);
    }
    f
}

/// Objective for a client whose own vote is in the tally.
pub fn objective_f(u: f64, m: f64, m_p: f64, sign: VoteSign) -> Result<f64> {
    objective(u, &Tally::new(m, m_p, sign, true)?)
}

/// `v̂ = (û + s·√(û² + 4))/2`.
pub fn v_from_u(u: f64, sign: VoteSign) -> f64 {
    let (plus, _) = radical_pair(u, sign.value());
    sign.value() * plus / 2.0
}

/// `μ̂ = (s·√(û² + 4) − û)·û·w̄/2` with `s = Sign(w̄)`. A zero `w̄` yields 0.
pub fn mu_hat(u: f64, w_bar: f64) -> f64 {
    shrink_ratio(u, VoteSign::of(w_bar)) * w_bar
}

/// `μ̂/w̄ = û/v̂` for the given sign.
pub fn shrink_ratio(u: f64, sign: VoteSign) -> f64 {
    // s·r − u = s·(r − s·u).
    let (_, minus) = radical_pair(u, sign.value());
    sign.value() * minus * u / 2.0
}

/// Virtual client count `|D|/|D_i|` for a shard of `local_size` samples.
pub fn virtual_m(total_size: usize, local_size: usize) -> Result<f64> {
    if local_size == 0 {
        return Err(Error::Domain("local dataset size must be >= 1".into()));
    }
    if total_size < local_size {
        return Err(Error::Domain(format!(
            "total size {total_size} smaller than local size {local_size}"
        )));
    }
    Ok(total_size as f64 / local_size as f64)
}

/// `clip(α·μ̂, −1, 1)` with `μ̂` from `u_hat`, or the unanimous limit when
/// `u_hat` is `None`.
pub fn scaled_update(u_hat: Option<f64>, w_bar: f64, alpha: f64) -> f64 {
    let mu = match u_hat {
        Some(u) => mu_hat(u, w_bar),
        None => w_bar,
    };
    (alpha * mu).clamp(-1.0, 1.0)
}

/// Estimates `μ̂` with the exact solver and returns `clip(α·μ̂)`.
pub fn update_weight(problem: &EstimationProblem, fit: Option<&CurveFit>) -> Result<f64> {
    let mut est = match fit {
        Some(f) => Estimator::with_fit(EstimatorMode::CurveFit, f.clone()),
        None => Estimator::new(EstimatorMode::Exact),
    };
    est.update(problem)
}
