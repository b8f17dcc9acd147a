//! Numerical checks of the binary gradient-descent convergence conditions.
//!
//! Test problems are quadratics `F(W) = ½(W − c)ᵀA(W − c)` with symmetric
//! positive definite `A`, so strong convexity `ξ = λ_min(A)` and smoothness
//! `β = λ_max(A)` are exact. The binary optimum is found by enumeration.
//! Violations found by the checks are reported as data, not raised as errors.

mod descent;
mod geometry;
mod theorem2;

pub use descent::{
    descent_suite, least_squares_slope, run_binary_gd, suite_run, write_findings_csv,
    DescentSummary, StepRecord, SuiteRun, TraceRecord, MIN_EPSILON,
};
pub use geometry::{check_geometry_lemma, geometry_audit, GeometryAudit, GeometryReport};
pub use theorem2::{
    probe_theorem2, AlphaChoice, Theorem2Probe, EXPECTED_ALPHA_RANGE, MNIST_LIKE_GRID,
};

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Largest dimension accepted by [`binary_optimum`].
pub const MAX_ENUMERATION_DIM: usize = 20;

/// A box-constrained quadratic with known curvature bounds.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvexProblem {
    pub a: DMatrix<f64>,
    pub c: DVector<f64>,
    /// Strong-convexity constant `λ_min(A)`.
    pub xi: f64,
    /// Smoothness constant `λ_max(A)`.
    pub beta_smooth: f64,
    /// Bound on `‖∇F‖` over `[-1, 1]^N`: `β·(√N + ‖c‖)`.
    pub rho: f64,
}

impl ConvexProblem {
    pub fn new(a: DMatrix<f64>, c: DVector<f64>) -> Result<Self> {
        let n = a.nrows();
        if n == 0 || a.ncols() != n || c.len() != n {
            return Err(Error::Shape(format!(
                "A is {}x{}, c has {} entries",
                a.nrows(),
                a.ncols(),
                c.len()
            )));
        }
        if (&a - a.transpose()).amax() > 1e-12 * a.amax().max(1.0) {
            return Err(Error::InvalidValue("A must be symmetric".into()));
        }
        let eig = SymmetricEigen::new(a.clone()).eigenvalues;
        let xi = eig.min();
        let beta_smooth = eig.max();
        if !(xi > 0.0) {
            return Err(Error::InvalidValue(format!(
                "A is not positive definite (λ_min = {xi})"
            )));
        }
        let rho = beta_smooth * ((n as f64).sqrt() + c.norm());
        Ok(Self {
            a,
            c,
            xi,
            beta_smooth,
            rho,
        })
    }

    /// `A = Q·diag(e)·Qᵀ` with a random orthogonal `Q` and eigenvalues
    /// `e` uniform in `[ξ, β]`, the extremes included; centre `c` uniform in
    /// `[-c_max, c_max]^N`.
    pub fn random<R: Rng>(
        n: usize,
        xi: f64,
        beta_smooth: f64,
        c_max: f64,
        rng: &mut R,
    ) -> Result<Self> {
        if n == 0 || !(xi > 0.0 && xi <= beta_smooth) {
            return Err(Error::Config(format!(
                "need N >= 1 and 0 < ξ <= β (N = {n}, ξ = {xi}, β = {beta_smooth})"
            )));
        }
        let g: DMatrix<f64> = DMatrix::from_fn(n, n, |_, _| StandardNormal.sample(rng));
        let q = g.qr().q();
        let mut e: Vec<f64> = (0..n).map(|_| rng.random_range(xi..=beta_smooth)).collect();
        e[0] = xi;
        if n > 1 {
            e[n - 1] = beta_smooth;
        }
        let a: DMatrix<f64> = &q * DMatrix::from_diagonal(&DVector::from_vec(e)) * q.transpose();
        let a = (&a + a.transpose()) * 0.5;
        let c = DVector::from_fn(n, |_, _| rng.random_range(-c_max..=c_max));
        Self::new(a, c)
    }

    pub fn dim(&self) -> usize {
        self.c.len()
    }

    pub fn value(&self, w: &DVector<f64>) -> f64 {
        let d = w - &self.c;
        0.5 * d.dot(&(&self.a * &d))
    }

    pub fn gradient(&self, w: &DVector<f64>) -> DVector<f64> {
        &self.a * (w - &self.c)
    }
}

/// Exact `argmin F` over `{−1, 1}^N` by enumerating all `2^N` points in
/// lexicographic order (`−1 < +1`); ties go to the first point found.
pub fn binary_optimum(problem: &ConvexProblem) -> Result<DVector<f64>> {
    let n = problem.dim();
    if n > MAX_ENUMERATION_DIM {
        return Err(Error::Unsupported(format!(
            "exhaustive binary search is limited to N <= {MAX_ENUMERATION_DIM}, got N = {n}"
        )));
    }
    let point = |mask: u64| {
        DVector::from_fn(n, |i, _| {
            if mask >> (n - 1 - i) & 1 == 1 {
                1.0
            } else {
                -1.0
            }
        })
    };
    let mut best = (f64::INFINITY, 0u64);
    for mask in 0..(1u64 << n) {
        let v = problem.value(&point(mask));
        if v < best.0 {
            best = (v, mask);
        }
    }
    Ok(point(best.1))
}

/// Both printed forms of the step-size bound `φ(λ, K)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PhiForms {
    /// The closed form with square roots stated with the descent condition.
    pub radical: f64,
    /// The rewritten form `((λ−1)/λ)·cos(arccos√(ξ/β) + arccos√(K/N) + arccos(λ/√(λ²+1)))`.
    pub cosine: f64,
}

impl PhiForms {
    /// `cosine / radical`; expanding the cosine of the sum shows it equals `β`.
    pub fn ratio(&self) -> f64 {
        self.cosine / self.radical
    }
}

fn acos_checked(x: f64, name: &str) -> Result<f64> {
    if !(-1.0..=1.0).contains(&x) {
        return Err(Error::Domain(format!(
            "arccos argument {name} = {x} outside [-1, 1]"
        )));
    }
    Ok(x.acos())
}

/// Evaluates `φ(λ, K)` in both forms for `λ > 1`, `1 <= K <= N`,
/// `0 < ξ <= β`.
pub fn phi(lambda: f64, k: f64, xi: f64, beta_smooth: f64, n: f64) -> Result<PhiForms> {
    if !(lambda > 1.0 && lambda.is_finite()) {
        return Err(Error::Domain(format!(
            "λ = {lambda} must be finite and > 1"
        )));
    }
    if !(k >= 1.0 && k <= n) {
        return Err(Error::Domain(format!("K = {k} outside [1, N = {n}]")));
    }
    if !(xi > 0.0 && xi <= beta_smooth) {
        return Err(Error::Domain(format!(
            "need 0 < ξ <= β, got ξ = {xi}, β = {beta_smooth}"
        )));
    }
    let a = acos_checked((xi / beta_smooth).sqrt(), "√(ξ/β)")?;
    let b = acos_checked((k / n).sqrt(), "√(K/N)")?;
    let c = acos_checked(lambda / (lambda * lambda + 1.0).sqrt(), "λ/√(λ²+1)")?;
    let cosine = (lambda - 1.0) / lambda * (a + b + c).cos();
    let d = beta_smooth - xi;
    let bracket = lambda * (xi * k).sqrt()
        - (xi * (n - k)).sqrt()
        - lambda * (d * (n - k)).sqrt()
        - (k * d).sqrt();
    let radical = (lambda - 1.0)
        / (beta_smooth.powi(3) * lambda * lambda * n * (lambda * lambda + 1.0)).sqrt()
        * bracket;
    Ok(PhiForms { radical, cosine })
}
