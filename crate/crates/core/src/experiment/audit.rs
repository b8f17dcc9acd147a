//! Estimator audits: solver against a brute-force grid, the contraction
//! property and the logarithmic curve fit.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::mlpu::{
    contraction_audit, default_sample_points, fit_curve, objective_f, solve_u, ContractionAudit,
    CurveFit, VoteSign, DEFAULT_TOL, U_MAX,
};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OracleCase {
    pub m_p: f64,
    pub sign: VoteSign,
    pub solver: f64,
    pub oracle: f64,
}

impl OracleCase {
    pub fn error(&self) -> f64 {
        (self.solver - self.oracle).abs()
    }
}

/// Solver against grid argmax over every non-unanimous integer tally.
/// Unanimous tallies have no interior maximizer and are skipped.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OracleAudit {
    pub m: usize,
    pub step: f64,
    pub cases: usize,
    pub max_error: f64,
    pub worst: Option<OracleCase>,
}

fn grid_argmax(m: f64, m_p: f64, sign: VoteSign, step: f64) -> Result<f64> {
    let n = (2.0 * U_MAX / step).round() as usize;
    let mut best = (f64::NEG_INFINITY, 0.0);
    for k in 0..=n {
        let u = -U_MAX + k as f64 * step;
        let v = objective_f(u, m, m_p, sign)?;
        if v > best.0 {
            best = (v, u);
        }
    }
    Ok(best.1)
}

pub fn oracle_audit(m: usize, step: f64) -> Result<OracleAudit> {
    let tallies: Vec<(f64, VoteSign)> = [VoteSign::Positive, VoteSign::Negative]
        .into_iter()
        .flat_map(|s| (1..m).map(move |k| (k as f64, s)))
        .collect();
    let cases: Vec<OracleCase> = tallies
        .par_iter()
        .map(|&(m_p, sign)| {
            Ok(OracleCase {
                m_p,
                sign,
                solver: solve_u(m as f64, m_p, sign, DEFAULT_TOL)?,
                oracle: grid_argmax(m as f64, m_p, sign, step)?,
            })
        })
        .collect::<Result<_>>()?;
    let worst = cases
        .iter()
        .max_by(|a, b| a.error().total_cmp(&b.error()))
        .cloned();
    Ok(OracleAudit {
        m,
        step,
        cases: cases.len(),
        max_error: worst.as_ref().map_or(0.0, OracleCase::error),
        worst,
    })
}

/// Combined audit for one client count.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EstimatorAudit {
    pub m: usize,
    pub oracle: OracleAudit,
    pub contraction: ContractionAudit,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fit: Option<CurveFit>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fit_failure: Option<String>,
}

impl EstimatorAudit {
    /// Descriptions of every failed check.
    pub fn failures(&self, oracle_tolerance: f64, fit_error_threshold: f64) -> Vec<String> {
        let mut out = Vec::new();
        if self.oracle.max_error > oracle_tolerance {
            out.push(format!(
                "M = {}: solver differs from grid oracle by {:.3e} > {oracle_tolerance:e}",
                self.m, self.oracle.max_error
            ));
        }
        if self.contraction.violations > 0 {
            out.push(format!(
                "M = {}: |μ̂/w̄| >= 1 on {} of {} samples (max {:.4} at û = {:.4}, w̄ = {:.4})",
                self.m,
                self.contraction.violations,
                self.contraction.samples,
                self.contraction.max_abs_ratio,
                self.contraction.worst.0,
                self.contraction.worst.1
            ));
        }
        match (&self.fit, &self.fit_failure) {
            (Some(f), _) if f.max_fit_error > fit_error_threshold => out.push(format!(
                "M = {}: curve fit error {:.4} > {fit_error_threshold}",
                self.m, f.max_fit_error
            )),
            (None, Some(e)) => out.push(format!("M = {}: curve fit failed: {e}", self.m)),
            _ => {}
        }
        out
    }
}

pub fn audit_estimator(
    m: usize,
    oracle_step: f64,
    contraction_samples: usize,
    seed: u64,
) -> Result<EstimatorAudit> {
    let oracle = oracle_audit(m, oracle_step)?;
    let contraction = contraction_audit(contraction_samples, U_MAX, seed)?;
    let (fit, fit_failure) = match fit_curve(m as f64, &default_sample_points(m as f64)) {
        Ok(f) => (Some(f), None),
        Err(e) => (None, Some(e.to_string())),
    };
    Ok(EstimatorAudit {
        m,
        oracle,
        contraction,
        fit,
        fit_failure,
    })
}
