use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::estimator::{Estimator, EstimatorMode};
use super::{Tally, VoteSign};
use crate::error::{Error, Result};

/// Monte-Carlo bias of the scaled estimate `α·μ̂` for one `(μ, σ, α)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BiasRow {
    pub mu: f64,
    pub sigma: f64,
    pub alpha: f64,
    /// Mean of `α·μ̂` over all clients and trials.
    pub mean_estimate: f64,
    /// `mean_estimate − μ`.
    pub bias: f64,
}

impl BiasRow {
    /// `bias/μ`, undefined (NaN) for `μ = 0`.
    pub fn relative_bias(&self) -> f64 {
        self.bias / self.mu
    }
}

/// Samples `m` weights from `N(μ, σ²)`, tallies their signs, and records the
/// mean of `α·μ̂` across the `m` clients, averaged over `trials` rounds, for
/// every `α` in `alphas`.
///
/// Unanimous tallies use the `μ̂ = w̄` limit.
pub fn bias_probe(
    m: usize,
    mu: f64,
    sigma: f64,
    alphas: &[f64],
    trials: usize,
    seed: u64,
) -> Result<Vec<BiasRow>> {
    if m == 0 || trials == 0 {
        return Err(Error::Config(
            "bias probe needs m >= 1 and trials >= 1".into(),
        ));
    }
    let normal = Normal::new(mu, sigma)
        .map_err(|e| Error::Config(format!("invalid normal ({mu}, {sigma}): {e}")))?;
    if !(sigma > 0.0) {
        return Err(Error::Config(format!("σ = {sigma} must be positive")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut est = Estimator::new(EstimatorMode::Exact);
    // ratio[k][s]: μ̂/w̄ for k positive votes and local sign s.
    let mut ratios = vec![[f64::NAN; 2]; m + 1];
    for (k, slot) in ratios.iter_mut().enumerate() {
        for (si, sign) in [VoteSign::Positive, VoteSign::Negative]
            .into_iter()
            .enumerate()
        {
            if let Ok(t) = Tally::new(m as f64, k as f64, sign, true) {
                slot[si] = est.ratio(&t)?;
            }
        }
    }
    let mut total = 0.0;
    let mut w = vec![0.0; m];
    for _ in 0..trials {
        for x in w.iter_mut() {
            *x = normal.sample(&mut rng);
        }
        let k = w.iter().filter(|&&x| x > 0.0).count();
        let sum: f64 = w
            .iter()
            .map(|&x| {
                let si = if x > 0.0 { 0 } else { 1 };
                ratios[k][si] * x
            })
            .sum();
        total += sum / m as f64;
    }
    let base = total / trials as f64;
    Ok(alphas
        .iter()
        .map(|&alpha| BiasRow {
            mu,
            sigma,
            alpha,
            mean_estimate: alpha * base,
            bias: alpha * base - mu,
        })
        .collect())
}

/// The row with the smallest `|bias|`.
pub fn best_alpha(rows: &[BiasRow]) -> Option<&BiasRow> {
    rows.iter()
        .min_by(|a, b| a.bias.abs().total_cmp(&b.bias.abs()))
}

/// Outcome of sampling `|μ̂/w̄|` over a box of `(û, w̄)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ContractionAudit {
    pub samples: usize,
    /// Samples with `|μ̂/w̄| >= 1`.
    pub violations: usize,
    /// Violations among samples where `û` and `w̄` share a sign.
    pub same_sign_violations: usize,
    pub max_abs_ratio: f64,
    /// The `(û, w̄)` attaining `max_abs_ratio`.
    pub worst: (f64, f64),
}

/// Draws `û ~ U[-u_max, u_max]` and `w̄ = ±U[1e-3, 1]` and checks
/// `|μ̂/w̄| < 1`.
pub fn contraction_audit(samples: usize, u_max: f64, seed: u64) -> Result<ContractionAudit> {
    if samples == 0 || !(u_max > 0.0) {
        return Err(Error::Config(
            "contraction audit needs samples >= 1 and u_max > 0".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut audit = ContractionAudit {
        samples,
        violations: 0,
        same_sign_violations: 0,
        max_abs_ratio: 0.0,
        worst: (0.0, 0.0),
    };
    for _ in 0..samples {
        let u = rng.random_range(-u_max..=u_max);
        let mag: f64 = rng.random_range(1e-3..=1.0);
        let w = if rng.random_bool(0.5) { mag } else { -mag };
        let r = (super::mu_hat(u, w) / w).abs();
        if r >= 1.0 {
            audit.violations += 1;
            audit.same_sign_violations += (u * w > 0.0) as usize;
        }
        if r > audit.max_abs_ratio {
            audit.max_abs_ratio = r;
            audit.worst = (u, w);
        }
    }
    Ok(audit)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_mean_has_small_bias() {
        let rows = bias_probe(20, 0.0, 0.1, &[1.0, 1.5, 2.0], 4000, 1).unwrap();
        for r in rows {
            assert!(r.bias.abs() < 0.005, "{r:?}");
        }
    }

    #[test]
    fn unit_alpha_contracts() {
        for mu in [0.02, 0.05, -0.05] {
            let rows = bias_probe(20, mu, 0.1, &[1.0], 10_000, 2).unwrap();
            assert!(rows[0].mean_estimate.abs() < mu.abs(), "{:?}", rows[0]);
        }
    }

    #[test]
    fn estimate_is_linear_in_alpha() {
        let rows = bias_probe(10, 0.05, 0.1, &[1.0, 2.0], 500, 3).unwrap();
        assert!((rows[1].mean_estimate - 2.0 * rows[0].mean_estimate).abs() < 1e-12);
        assert_eq!(
            best_alpha(&rows).unwrap().alpha,
            if rows[1].bias.abs() < rows[0].bias.abs() {
                2.0
            } else {
                1.0
            }
        );
    }
}

#[cfg(test)]
mod audit_tests {
    use super::*;

    /// `|û/v̂|` with `v̂ = (û + s√(û² + 4))/2`, evaluated directly.
    fn ratio_oracle(u: f64, w: f64) -> f64 {
        let s = if w > 0.0 { 1.0 } else { -1.0 };
        (u / ((u + s * (u * u + 4.0).sqrt()) / 2.0)).abs()
    }

    #[test]
    fn same_sign_draws_contract() {
        let a = contraction_audit(20_000, 8.0, 1).unwrap();
        assert_eq!(a.same_sign_violations, 0);
        assert!(
            (a.max_abs_ratio - ratio_oracle(a.worst.0, a.worst.1)).abs() < 1e-9 * a.max_abs_ratio
        );
    }

    #[test]
    fn opposite_signs_expand() {
        assert!(ratio_oracle(-1.0, 0.5) > 1.0);
        let a = contraction_audit(20_000, 8.0, 2).unwrap();
        assert!(a.violations > 0);
    }
}
