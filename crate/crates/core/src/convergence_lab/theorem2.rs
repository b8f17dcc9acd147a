//! Monte-Carlo check of estimator bias and the preferred scaling range.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mlpu::{best_alpha, bias_probe, BiasRow};

/// Scaling factors expected to minimize the bias.
pub const EXPECTED_ALPHA_RANGE: (f64, f64) = (1.25, 2.0);

/// Population grid resembling trained MNIST weights: small means relative
/// to the spread across clients.
pub const MNIST_LIKE_GRID: [(f64, f64); 6] = [
    (0.01, 0.05),
    (0.02, 0.05),
    (0.01, 0.1),
    (0.03, 0.1),
    (0.05, 0.2),
    (0.1, 0.3),
];

/// The `α` with the smallest `|bias|` for one population.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AlphaChoice {
    pub mu: f64,
    pub sigma: f64,
    pub alpha: f64,
    pub bias: f64,
    pub in_expected_range: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Theorem2Probe {
    pub m: usize,
    pub rows: Vec<BiasRow>,
    pub best: Vec<AlphaChoice>,
}

/// Bias table over `populations × alphas` for `m` clients. Choices outside
/// [`EXPECTED_ALPHA_RANGE`] are logged, not rejected.
pub fn probe_theorem2(
    m: usize,
    populations: &[(f64, f64)],
    alphas: &[f64],
    trials: usize,
    seed: u64,
) -> Result<Theorem2Probe> {
    if populations.is_empty() || alphas.is_empty() {
        return Err(Error::Config(
            "probe needs at least one population and one α".into(),
        ));
    }
    let mut rows = Vec::new();
    let mut best = Vec::new();
    for (i, &(mu, sigma)) in populations.iter().enumerate() {
        let r = bias_probe(m, mu, sigma, alphas, trials, seed.wrapping_add(i as u64))?;
        let b = best_alpha(&r).expect("alphas is non-empty");
        let in_range = (EXPECTED_ALPHA_RANGE.0..=EXPECTED_ALPHA_RANGE.1).contains(&b.alpha);
        if !in_range {
            log::warn!(
                "best α = {} for μ = {mu}, σ = {sigma}, M = {m} lies outside [{}, {}]",
                b.alpha,
                EXPECTED_ALPHA_RANGE.0,
                EXPECTED_ALPHA_RANGE.1
            );
        }
        best.push(AlphaChoice {
            mu,
            sigma,
            alpha: b.alpha,
            bias: b.bias,
            in_expected_range: in_range,
        });
        rows.extend(r);
    }
    Ok(Theorem2Probe { m, rows, best })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn symmetric_population_is_unbiased() {
        let p = probe_theorem2(10, &[(0.0, 0.1)], &[1.0, 1.5, 2.0], 4000, 3).unwrap();
        assert!(p.rows.iter().all(|r| r.bias.abs() < 0.005));
    }

    #[test]
    fn unit_alpha_contracts_toward_zero() {
        let p = probe_theorem2(10, &MNIST_LIKE_GRID, &[1.0], 10_000, 4).unwrap();
        for r in &p.rows {
            assert!(r.mean_estimate.abs() < r.mu.abs(), "{r:?}");
        }
    }

    #[test]
    fn rejects_empty_grid() {
        assert!(probe_theorem2(10, &[], &[1.0], 10, 0).is_err());
    }
}
