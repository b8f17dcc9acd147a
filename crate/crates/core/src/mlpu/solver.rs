use super::{objective_with, Tally, VoteSign};
use crate::error::{Error, Result};

/// Half-width of the search interval for `û`.
pub const U_MAX: f64 = 8.0;
/// Spacing of the coarse bracketing grid.
pub const COARSE_STEP: f64 = 0.25;
/// Default golden-section tolerance.
pub const DEFAULT_TOL: f64 = 1e-6;

const INV_PHI: f64 = 0.618_033_988_749_894_9;

/// Maximizer `û` of the objective for a client whose own vote is in the tally.
pub fn solve_u(m: f64, m_p: f64, sign: VoteSign, tol: f64) -> Result<f64> {
    solve_tally(&Tally::new(m, m_p, sign, true)?, tol)
}

/// Maximizes the objective on `[-U_MAX, U_MAX]`. A coarse grid locates the
/// best grid point, its neighbours bracket the maximum, and golden-section
/// search refines it until the bracket is narrower than `tol`.
///
/// Fails with a solver error when the best grid point lies on the boundary,
/// which happens for unanimous tallies whose objective is monotone.
pub fn solve_tally(tally: &Tally, tol: f64) -> Result<f64> {
    if !(tol.is_finite() && tol > 0.0) {
        return Err(Error::InvalidValue(format!(
            "tolerance {tol} must be positive"
        )));
    }
    let (pos, neg) = tally.coefficients()?;
    let s = tally.sign.value();
    let f = |u: f64| objective_with(u, pos, neg, s);

    let n = (2.0 * U_MAX / COARSE_STEP).round() as usize;
    let grid = |k: usize| -U_MAX + k as f64 * COARSE_STEP;
    let mut best_k = 0;
    let mut best = f64::NEG_INFINITY;
    for k in 0..=n {
        let v = f(grid(k));
        if v > best {
            best = v;
            best_k = k;
        }
    }
    if !best.is_finite() {
        return Err(Error::Solver(format!("objective not finite for {tally:?}")));
    }
    if best_k == 0 || best_k == n {
        return Err(Error::Solver(format!(
            "no interior maximum on [-{U_MAX}, {U_MAX}] for M = {}, M_P = {}, sign {:?}",
            tally.m, tally.m_p, tally.sign
        )));
    }

    let (mut a, mut b) = (grid(best_k - 1), grid(best_k + 1));
    let mut c = b - INV_PHI * (b - a);
    let mut d = a + INV_PHI * (b - a);
    let (mut fc, mut fd) = (f(c), f(d));
    while b - a > tol {
        if fc >= fd {
            b = d;
            d = c;
            fd = fc;
            c = b - INV_PHI * (b - a);
            fc = f(c);
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + INV_PHI * (b - a);
            fd = f(d);
        }
    }
    Ok(0.5 * (a + b))
}
