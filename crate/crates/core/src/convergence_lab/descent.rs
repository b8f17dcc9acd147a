//! Binary gradient descent on convex quadratics, with per-step checks of the
//! descent condition.
//!
//! The update evaluates the gradient at the binary point and applies it to
//! the auxiliary point: `W̄_{t+1} = clip(W̄_t − η∇F(W^b_t))`. At each step
//! the trace records `K_t` (coordinates where `W^b_t` differs from the
//! binary optimum `W*`), `λ_t = ‖∇F(W^b_t)‖/ε` with `ε = ‖∇F(W*)‖`, and
//! `φ(λ_t, K_t)`.
//!
//! Two brackets for `λ_t` are checked: the printed one,
//! `(Kξ − ε)/ε ≤ λ ≤ (Kβ + ε)/ε`, and the one that follows from
//! `‖W^b − W*‖ = 2√K` with strong convexity and smoothness,
//! `(2√Kξ − ε)/ε ≤ λ ≤ (2√Kβ + ε)/ε`.

use std::io::Write;
use std::path::Path;

use nalgebra::DVector;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{binary_optimum, phi, ConvexProblem, PhiForms};
use crate::error::{Error, Result};

/// Below this, `ε = ‖∇F(W*)‖` is treated as zero and `λ_t` is undefined.
pub const MIN_EPSILON: f64 = 1e-12;

/// One step of [`run_binary_gd`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub t: usize,
    pub w_bar: Vec<f64>,
    pub w_b: Vec<f64>,
    pub k: usize,
    pub lambda: f64,
    /// `‖W̄_t − W*‖`.
    pub dist_aux: f64,
    /// `‖W̄_{t+1} − W*‖`.
    pub dist_aux_next: f64,
    /// `‖W^b_t − W*‖²`, equal to `4K_t` exactly.
    pub dist_bin_sq: f64,
    /// Both forms of `φ(λ_t, K_t)`, when `λ_t > 1` and `K_t >= 1`.
    pub phi: Option<PhiForms>,
    /// `0 < η < φ` with the radical form.
    pub precondition_met: bool,
    /// `min(λ − lower, upper − λ)` for the printed bracket.
    pub margin_bracket_printed: f64,
    /// The same for the `2√K` bracket.
    pub margin_bracket_derived: f64,
    /// `‖W̄_t − W*‖² − 4(φ − η)ηβξK_t − ‖W̄_{t+1} − W*‖²`, when `φ` is
    /// defined; must be positive whenever the precondition holds.
    pub margin_descent: Option<f64>,
}

/// A full descent trace with the problem constants.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub n: usize,
    pub xi: f64,
    pub beta_smooth: f64,
    pub epsilon: f64,
    pub eta: f64,
    pub w_star: Vec<f64>,
    pub steps: Vec<StepRecord>,
    pub final_w_bar: Vec<f64>,
}

impl TraceRecord {
    pub fn passing_steps(&self) -> impl Iterator<Item = &StepRecord> {
        self.steps.iter().filter(|s| s.precondition_met)
    }

    /// Precondition-passing steps whose descent margin is not positive.
    pub fn descent_violations(&self) -> usize {
        self.passing_steps()
            .filter(|s| !(s.margin_descent.unwrap_or(f64::NAN) > 0.0))
            .count()
    }

    /// Steps where `‖W^b_t − W*‖² != 4K_t`.
    pub fn identity_failures(&self) -> usize {
        self.steps
            .iter()
            .filter(|s| s.dist_bin_sq != 4.0 * s.k as f64)
            .count()
    }

    /// First step at which `K_t` reaches its smallest value on the trace.
    /// After it the binary point no longer approaches `W*` and the
    /// auxiliary point moves within a bounded set, since `∇F(W*) != 0`.
    pub fn k_stable_step(&self) -> usize {
        let min = self.steps.iter().map(|s| s.k).min().unwrap_or(0);
        self.steps.iter().position(|s| s.k == min).unwrap_or(0)
    }

    /// Least-squares slope of `ln‖W̄_t − W*‖` over `t = 0..=T_s`, with
    /// `T_s` from [`TraceRecord::k_stable_step`] (at least one step).
    pub fn log_distance_slope(&self) -> Option<f64> {
        let end = self.k_stable_step().max(1).min(self.steps.len());
        let mut pts: Vec<(f64, f64)> = self.steps[..end]
            .iter()
            .map(|s| (s.t as f64, s.dist_aux.ln()))
            .collect();
        if let Some(s) = self.steps.get(end - 1) {
            pts.push(((s.t + 1) as f64, s.dist_aux_next.ln()));
        }
        least_squares_slope(&pts)
    }
}

/// Slope of the ordinary least-squares line; `None` with fewer than two
/// distinct abscissae or a non-finite ordinate.
pub fn least_squares_slope(pts: &[(f64, f64)]) -> Option<f64> {
    if pts.len() < 2 || pts.iter().any(|p| !p.1.is_finite()) {
        return None;
    }
    let n = pts.len() as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
    let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    (sxx > 0.0).then(|| sxy / sxx)
}

fn binarize(w: &DVector<f64>) -> DVector<f64> {
    w.map(|x| if x > 0.0 { 1.0 } else { -1.0 })
}

fn bracket_margin(lambda: f64, lo: f64, hi: f64) -> f64 {
    (lambda - lo).min(hi - lambda)
}

/// Runs `steps` iterations from `w0` (clipped into the box) and records the
/// trace. Violations are recorded, never raised.
pub fn run_binary_gd(
    problem: &ConvexProblem,
    eta: f64,
    w0: &DVector<f64>,
    steps: usize,
) -> Result<TraceRecord> {
    let n = problem.dim();
    if w0.len() != n {
        return Err(Error::Shape(format!(
            "W̄_0 has {} entries, problem has N = {n}",
            w0.len()
        )));
    }
    if !(eta > 0.0 && eta.is_finite()) {
        return Err(Error::Config(format!(
            "step size η = {eta} must be positive"
        )));
    }
    let w_star = binary_optimum(problem)?;
    let epsilon = problem.gradient(&w_star).norm();
    if epsilon < MIN_EPSILON {
        return Err(Error::Domain(format!(
            "ε = ‖∇F(W*)‖ = {epsilon:e} vanishes, λ_t is undefined"
        )));
    }
    let (xi, beta) = (problem.xi, problem.beta_smooth);
    let nf = n as f64;
    let mut w_bar = w0.map(|x| x.clamp(-1.0, 1.0));
    let mut records = Vec::with_capacity(steps);
    for t in 0..steps {
        let w_b = binarize(&w_bar);
        let k = w_b
            .iter()
            .zip(w_star.iter())
            .filter(|(a, b)| a != b)
            .count();
        let kf = k as f64;
        let grad = problem.gradient(&w_b);
        let lambda = grad.norm() / epsilon;
        let next = (&w_bar - eta * &grad).map(|x| x.clamp(-1.0, 1.0));
        let dist_aux = (&w_bar - &w_star).norm();
        let dist_aux_next = (&next - &w_star).norm();
        let phi_forms = if k >= 1 && lambda > 1.0 {
            phi(lambda, kf, xi, beta, nf).ok()
        } else {
            None
        };
        let precondition_met = phi_forms.is_some_and(|f| eta < f.radical);
        let margin_descent = phi_forms.map(|f| {
            dist_aux.powi(2)
                - 4.0 * (f.radical - eta) * eta * beta * xi * kf
                - dist_aux_next.powi(2)
        });
        let two_root_k = 2.0 * kf.sqrt();
        records.push(StepRecord {
            t,
            w_bar: w_bar.as_slice().to_vec(),
            w_b: w_b.as_slice().to_vec(),
            k,
            lambda,
            dist_aux,
            dist_aux_next,
            dist_bin_sq: (&w_b - &w_star).norm_squared(),
            phi: phi_forms,
            precondition_met,
            margin_bracket_printed: bracket_margin(
                lambda,
                (kf * xi - epsilon) / epsilon,
                (kf * beta + epsilon) / epsilon,
            ),
            margin_bracket_derived: bracket_margin(
                lambda,
                (two_root_k * xi - epsilon) / epsilon,
                (two_root_k * beta + epsilon) / epsilon,
            ),
            margin_descent,
        });
        w_bar = next;
    }
    Ok(TraceRecord {
        n,
        xi,
        beta_smooth: beta,
        epsilon,
        eta,
        w_star: w_star.as_slice().to_vec(),
        steps: records,
        final_w_bar: w_bar.as_slice().to_vec(),
    })
}

/// Aggregate results of [`descent_suite`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DescentSummary {
    pub problems: usize,
    /// Problems regenerated because `ε` vanished.
    pub regenerated: usize,
    pub runs_with_passing_steps: usize,
    pub passing_steps: usize,
    pub descent_violations: usize,
    pub printed_bracket_violations: usize,
    pub derived_bracket_violations: usize,
    pub identity_failures: usize,
    /// Passing runs whose log-distance slope is negative.
    pub negative_slopes: usize,
    /// Passing runs with a defined slope.
    pub fitted_slopes: usize,
    /// Largest `|φ_cos/(β·φ_rad) − 1|` over all defined steps.
    pub max_phi_ratio_error: f64,
    /// Smallest `|φ_cos − φ_rad|` over steps where both are defined and
    /// `β != 1`, showing the forms disagree.
    pub min_phi_discrepancy: f64,
}

/// Problem, step size and trace for one suite instance.
pub struct SuiteRun {
    pub problem: ConvexProblem,
    pub regenerated: usize,
    pub trace: TraceRecord,
}

/// Suite parameters: `N` uniform in `4..=12`, `ξ = 1`, `β/ξ` uniform in
/// `[1, 1.5]`, centres uniform in `[-1, 1]^N`, and a start on the far side
/// of the optimum, `W̄_0 = −u ⊙ W*` with `u ~ U[0.1, 1]^N`, so `K_0 = N`.
///
/// The step size is `η = ½ min_t φ_t` where the minimum runs over positive
/// `φ` values of a pilot run at `η = 1/β`; if none are positive the run
/// falls back to `η = 1/(2β)` and has no passing steps.
pub fn suite_run(problem_id: usize, steps: usize, seed: u64) -> Result<SuiteRun> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(problem_id as u64 + 1);
    let mut regenerated = 0;
    let problem = loop {
        let n = rng.random_range(4..=12usize);
        let kappa = rng.random_range(1.0..=1.5);
        let p = ConvexProblem::random(n, 1.0, kappa, 1.0, &mut rng)?;
        let w_star = binary_optimum(&p)?;
        if p.gradient(&w_star).norm() >= MIN_EPSILON {
            break p;
        }
        regenerated += 1;
    };
    let w_star = binary_optimum(&problem)?;
    let w0 = DVector::from_fn(problem.dim(), |i, _| {
        -w_star[i] * rng.random_range(0.1..=1.0)
    });
    let pilot = run_binary_gd(&problem, 1.0 / problem.beta_smooth, &w0, steps)?;
    let min_phi = pilot
        .steps
        .iter()
        .filter_map(|s| s.phi.map(|f| f.radical))
        .filter(|&f| f > 0.0)
        .fold(f64::INFINITY, f64::min);
    let eta = if min_phi.is_finite() {
        0.5 * min_phi
    } else {
        0.5 / problem.beta_smooth
    };
    let trace = run_binary_gd(&problem, eta, &w0, steps)?;
    Ok(SuiteRun {
        problem,
        regenerated,
        trace,
    })
}

/// Runs [`suite_run`] for `problems` instances in parallel and summarizes.
pub fn descent_suite(
    problems: usize,
    steps: usize,
    seed: u64,
) -> Result<(DescentSummary, Vec<TraceRecord>)> {
    let runs: Vec<SuiteRun> = (0..problems)
        .into_par_iter()
        .map(|i| suite_run(i, steps, seed))
        .collect::<Result<_>>()?;
    let mut s = DescentSummary {
        problems,
        regenerated: 0,
        runs_with_passing_steps: 0,
        passing_steps: 0,
        descent_violations: 0,
        printed_bracket_violations: 0,
        derived_bracket_violations: 0,
        identity_failures: 0,
        negative_slopes: 0,
        fitted_slopes: 0,
        max_phi_ratio_error: 0.0,
        min_phi_discrepancy: f64::INFINITY,
    };
    for run in &runs {
        let tr = &run.trace;
        s.regenerated += run.regenerated;
        s.identity_failures += tr.identity_failures();
        for f in tr.steps.iter().filter_map(|st| st.phi) {
            if f.radical != 0.0 {
                s.max_phi_ratio_error = s
                    .max_phi_ratio_error
                    .max((f.ratio() / tr.beta_smooth - 1.0).abs());
            }
            if tr.beta_smooth != 1.0 {
                s.min_phi_discrepancy = s.min_phi_discrepancy.min((f.cosine - f.radical).abs());
            }
        }
        let passing: Vec<&StepRecord> = tr.passing_steps().collect();
        if passing.is_empty() {
            continue;
        }
        s.runs_with_passing_steps += 1;
        s.passing_steps += passing.len();
        s.descent_violations += tr.descent_violations();
        s.printed_bracket_violations += passing
            .iter()
            .filter(|st| st.margin_bracket_printed < 0.0)
            .count();
        s.derived_bracket_violations += passing
            .iter()
            .filter(|st| st.margin_bracket_derived < 0.0)
            .count();
        if let Some(slope) = tr.log_distance_slope() {
            s.fitted_slopes += 1;
            s.negative_slopes += (slope < 0.0) as usize;
        }
    }
    Ok((s, runs.into_iter().map(|r| r.trace).collect()))
}

fn fmt_opt(x: Option<f64>) -> String {
    x.map_or_else(String::new, |v| format!("{v:e}"))
}

/// Writes one row per step:
/// `problem_id,step,K_t,lambda_t,phi,margin_1,margin_2,precondition_met`,
/// followed by `phi_cosine,margin_1_derived`. `phi` is the radical form,
/// `margin_1` the printed-bracket margin and `margin_2` the descent margin;
/// undefined values are empty.
pub fn write_findings_csv(path: &Path, traces: &[TraceRecord]) -> Result<()> {
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(
        out,
        "problem_id,step,K_t,lambda_t,phi,margin_1,margin_2,precondition_met,phi_cosine,margin_1_derived"
    )?;
    for (id, tr) in traces.iter().enumerate() {
        for s in &tr.steps {
            writeln!(
                out,
                "{id},{},{},{:e},{},{:e},{},{},{},{:e}",
                s.t,
                s.k,
                s.lambda,
                fmt_opt(s.phi.map(|f| f.radical)),
                s.margin_bracket_printed,
                fmt_opt(s.margin_descent),
                s.precondition_met,
                fmt_opt(s.phi.map(|f| f.cosine)),
                s.margin_bracket_derived,
            )?;
        }
    }
    out.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::DMatrix;
    use proptest::prelude::*;

    fn diag_problem() -> ConvexProblem {
        let a = DMatrix::from_diagonal(&DVector::from_vec(vec![1.0, 1.2, 1.1, 1.0]));
        ConvexProblem::new(a, DVector::from_vec(vec![0.6, -0.7, 0.5, -0.9])).unwrap()
    }

    #[test]
    fn reaches_the_binary_optimum() {
        let p = diag_problem();
        let w0 = DVector::from_vec(vec![-0.5, 0.5, -0.5, 0.5]);
        let tr = run_binary_gd(&p, 0.1, &w0, 60).unwrap();
        assert_eq!(tr.w_star, vec![1.0, -1.0, 1.0, -1.0]);
        assert_eq!(tr.steps[0].k, 4);
        assert_eq!(tr.steps[tr.k_stable_step()].k, 0);
        assert_eq!(tr.identity_failures(), 0);
        assert!(tr.log_distance_slope().unwrap() < 0.0);
    }

    #[test]
    fn large_step_skips_the_descent_check() {
        let p = diag_problem();
        let w0 = DVector::from_vec(vec![-0.5, 0.5, -0.5, 0.5]);
        let tr = run_binary_gd(&p, 10.0, &w0, 5).unwrap();
        assert!(tr.steps.iter().all(|s| !s.precondition_met));
        assert_eq!(tr.descent_violations(), 0);
    }

    #[test]
    fn vanishing_epsilon_is_rejected() {
        let p = ConvexProblem::new(
            DMatrix::identity(3, 3),
            DVector::from_vec(vec![1.0, -1.0, 1.0]),
        )
        .unwrap();
        let err = run_binary_gd(&p, 0.1, &DVector::zeros(3), 3).unwrap_err();
        assert!(matches!(err, Error::Domain(_)));
    }

    #[test]
    fn derived_bracket_holds_on_suite_steps() {
        for id in 0..8 {
            let run = suite_run(id, 40, 5).unwrap();
            for s in &run.trace.steps {
                assert!(
                    s.margin_bracket_derived >= -1e-9,
                    "problem {id} step {}: {s:?}",
                    s.t
                );
            }
        }
    }

    #[test]
    fn slope_of_a_line() {
        let pts: Vec<(f64, f64)> = (0..5).map(|t| (t as f64, 3.0 - 0.5 * t as f64)).collect();
        assert!((least_squares_slope(&pts).unwrap() + 0.5).abs() < 1e-12);
        assert_eq!(least_squares_slope(&pts[..1]), None);
    }

    #[test]
    fn findings_csv_has_expected_header() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("findings.csv");
        let (_, traces) = descent_suite(2, 10, 1).unwrap();
        write_findings_csv(&path, &traces).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        let mut lines = text.lines();
        assert!(lines
            .next()
            .unwrap()
            .starts_with("problem_id,step,K_t,lambda_t,phi,margin_1,margin_2,precondition_met"));
        assert_eq!(lines.count(), 20);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]
        #[test]
        fn binary_distance_identity(seed in 0u64..1000, n in 1usize..9) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let p = ConvexProblem::random(n, 0.5, 2.0, 1.2, &mut rng).unwrap();
            let w0 = DVector::from_fn(n, |_, _| rng.random_range(-1.0..=1.0));
            if let Ok(tr) = run_binary_gd(&p, 0.05, &w0, 20) {
                prop_assert_eq!(tr.identity_failures(), 0);
                prop_assert!(tr.steps.iter().all(|s| s.w_bar.iter().all(|x| (-1.0..=1.0).contains(x))));
            }
        }
    }
}
