//! Acceptance criteria 1 to 10. Each test prints one
//! `criterion N PASS|FAIL: ...` line before asserting, and every tolerance
//! is pinned as a constant next to the test that uses it.

use std::io::Write;
use std::path::{Path, PathBuf};

use nalgebra::{DMatrix, DVector};
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use bifl_core::binary_net::{finite_difference_check, Batch, ForwardMode, GradParam, ModelBuilder};
use bifl_core::convergence_lab::{check_geometry_lemma, suite_run};
use bifl_core::data::load_mnist_dir;
use bifl_core::experiment::{
    self, load_datasets, run_federated_seed, MetricsRow, RunConfig, SUMMARY_FILE,
};
use bifl_core::federation::{ceil_log2, ledger_charge, StrategyKind, FLOAT_BITS};
use bifl_core::mlpu::{
    contraction_audit, default_sample_points, fit_curve, mu_hat, solve_u, VoteSign, DEFAULT_TOL,
};

/// Writes the verdict line past the harness's output capture, so it shows
/// for passing tests too, then asserts.
fn report(criterion: usize, pass: bool, detail: &str) {
    let verdict = if pass { "PASS" } else { "FAIL" };
    let line = format!("criterion {criterion} {verdict}: {detail}\n");
    let _ = std::io::stderr().write_all(line.as_bytes());
    assert!(pass, "criterion {criterion}: {detail}");
}

fn repo_root() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../..")
}

fn median(mut xs: Vec<f64>) -> f64 {
    xs.sort_by(f64::total_cmp);
    let n = xs.len();
    if n % 2 == 1 {
        xs[n / 2]
    } else {
        0.5 * (xs[n / 2 - 1] + xs[n / 2])
    }
}

// ---------------------------------------------------------------- 1

const ORACLE_STEP: f64 = 1e-4;
const ORACLE_TOL: f64 = 1e-3;
const ORACLE_U_MAX: f64 = 8.0;

/// `P(X > a)` for a standard normal `X`.
fn upper_tail(a: f64) -> f64 {
    0.5 * libm::erfc(a / std::f64::consts::SQRT_2)
}

/// The log-likelihood in `u` for a client with local sign `s` whose own
/// vote is among the `m_p` positive votes of `m`.
fn oracle_objective(u: f64, m: f64, m_p: f64, s: f64) -> f64 {
    let own_pos = if s > 0.0 { 1.0 } else { 0.0 };
    let own_neg = 1.0 - own_pos;
    let r = (u * u + 4.0).sqrt();
    // 1 − z(u) = z(−u), kept separate to avoid cancellation in the tail.
    (m_p - own_pos) * upper_tail(-u).ln() + (m - m_p - own_neg) * upper_tail(u).ln()
        - std::f64::consts::LN_2
        + (r + u * s).ln()
        - (r - u * s).powi(2) / 8.0
}

fn oracle_argmax(m: f64, m_p: f64, s: f64) -> f64 {
    let n = (2.0 * ORACLE_U_MAX / ORACLE_STEP).round() as usize;
    let mut best = (f64::NEG_INFINITY, f64::NAN);
    for k in 0..=n {
        let u = -ORACLE_U_MAX + k as f64 * ORACLE_STEP;
        let v = oracle_objective(u, m, m_p, s);
        if v > best.0 {
            best = (v, u);
        }
    }
    best.1
}

#[test]
fn criterion_01_estimator_matches_grid_oracle() {
    let start = std::time::Instant::now();
    let mut cases = 0;
    let mut worst = (0.0f64, String::new());
    let mut unanimous_rejected = true;
    for m in [10usize, 50, 100] {
        let mf = m as f64;
        for (sign, s) in [(VoteSign::Positive, 1.0), (VoteSign::Negative, -1.0)] {
            for m_p in 1..m {
                let mp = m_p as f64;
                let solver = solve_u(mf, mp, sign, DEFAULT_TOL).expect("interior tally solves");
                let err = (solver - oracle_argmax(mf, mp, s)).abs();
                cases += 1;
                if err > worst.0 {
                    worst = (err, format!("M = {m}, M_P = {m_p}, {sign:?}"));
                }
            }
            // A unanimous tally has a monotone objective and no maximizer.
            let unanimous = if s > 0.0 { mf } else { 0.0 };
            unanimous_rejected &= solve_u(mf, unanimous, sign, DEFAULT_TOL).is_err();
        }
    }
    let secs = start.elapsed().as_secs_f64();
    report(
        1,
        worst.0 <= ORACLE_TOL && secs < 60.0 && unanimous_rejected,
        &format!(
            "{cases} tallies, max |û − argmax| = {:.2e} at {} (tol {ORACLE_TOL:e}), unanimous tallies rejected: {unanimous_rejected}, {secs:.1} s",
            worst.0, worst.1
        ),
    );
}

// ---------------------------------------------------------------- 2

const FIT_REFERENCE: [f64; 3] = [-5.4092, 1.3761, -0.5038];
const FIT_REL_TOL: f64 = 0.10;
const FIT_MAX_ERROR: f64 = 0.05;

#[test]
fn criterion_02_curve_fit_reproduces_reference() {
    match fit_curve(100.0, &default_sample_points(100.0)) {
        Ok(f) => {
            let got = [f.a1, f.a2, f.a3];
            let close = got
                .iter()
                .zip(FIT_REFERENCE)
                .all(|(g, r)| ((g - r) / r).abs() <= FIT_REL_TOL);
            report(
                2,
                close && f.max_fit_error <= FIT_MAX_ERROR,
                &format!(
                    "(a1, a2, a3) = ({:.4}, {:.4}, {:.4}) vs {FIT_REFERENCE:?} within {FIT_REL_TOL}, max fit error {:.4} (limit {FIT_MAX_ERROR})",
                    f.a1, f.a2, f.a3, f.max_fit_error
                ),
            );
        }
        Err(e) => report(2, false, &format!("fit_curve(M = 100) failed: {e}")),
    }
}

// ---------------------------------------------------------------- 3

const CONTRACTION_SAMPLES: usize = 100_000;
const RATIO_AGREEMENT: f64 = 1e-9;

#[test]
fn criterion_03_contraction_audit() {
    let audit = contraction_audit(CONTRACTION_SAMPLES, ORACLE_U_MAX, 3).unwrap();
    // Independent recount: μ̂/w̄ = û/v̂ with v̂ = (û + s√(û² + 4))/2.
    let mut rng = ChaCha8Rng::seed_from_u64(33);
    let mut violations = 0;
    let mut max_ratio = 0.0f64;
    let mut disagreement = 0.0f64;
    for _ in 0..CONTRACTION_SAMPLES {
        let u: f64 = rng.random_range(-ORACLE_U_MAX..=ORACLE_U_MAX);
        let w: f64 = rng.random_range(1e-3..=1.0) * if rng.random_bool(0.5) { 1.0 } else { -1.0 };
        let s = if w > 0.0 { 1.0 } else { -1.0 };
        let ratio = u / ((u + s * (u * u + 4.0).sqrt()) / 2.0);
        disagreement = disagreement.max((mu_hat(u, w) / w - ratio).abs() / ratio.abs().max(1.0));
        violations += (ratio.abs() >= 1.0) as usize;
        max_ratio = max_ratio.max(ratio.abs());
    }
    report(
        3,
        audit.violations == 0 && violations == 0 && disagreement <= RATIO_AGREEMENT,
        &format!(
            "|μ̂/w̄| >= 1 on {} of {} library samples ({} with matching signs) and {violations} of {CONTRACTION_SAMPLES} oracle samples, max |μ̂/w̄| = {max_ratio:.3}; library ratio agrees with û/v̂ to {disagreement:.1e}",
            audit.violations, audit.samples, audit.same_sign_violations
        ),
    );
}

// ---------------------------------------------------------------- 4

/// FA-real uplink per training epoch over all clients in MB.
const TABLE_FA_UPLINK_MB: f64 = 32.9;
const TABLE_BIML_UPLINK_MB: f64 = 1.0;
const TABLE_CLIENTS: u64 = 100;
const RATIO_REL_TOL: f64 = 0.05;

fn synthetic_config(strategy: &str, output_dir: &Path) -> RunConfig {
    let text = format!(
        r#"
schema_version = 1
kind = "federated"
output_dir = "{}"
seeds = [5]

[dataset]
source = "synthetic"
classes = 4
dims = 16
train_per_class = 100
test_per_class = 25
data_seed = 1

[partition]
scheme = "iid"

[model]
hidden = [16]

[federation]
clients = 4
rounds = 2

[strategy]
{strategy}
"#,
        output_dir.display()
    );
    RunConfig::from_toml_str(&text, Path::new("/")).unwrap()
}

#[test]
fn criterion_04_communication_ledger() {
    // The parameter count at which the table's FA upload arises.
    let n = (TABLE_FA_UPLINK_MB * 1e6 * 8.0 / (FLOAT_BITS * TABLE_CLIENTS) as f64).round() as u64;
    let l = ModelBuilder::desk_default()
        .build::<f32>(0)
        .unwrap()
        .num_weight_layers() as u64;
    let fa = ledger_charge(StrategyKind::FaReal, n, l, TABLE_CLIENTS, true);
    let bi = ledger_charge(StrategyKind::BiMl, n, l, TABLE_CLIENTS, true);
    let exact_up = bi.uplink_per_client == n + 32 * l && fa.uplink_per_client == 32 * n;
    let exact_down = bi.downlink == ceil_log2(TABLE_CLIENTS + 1) * n + 32 * l
        && ceil_log2(TABLE_CLIENTS + 1) == 7;
    let ratio = fa.uplink as f64 / bi.uplink as f64;
    let table_ratio = TABLE_FA_UPLINK_MB / TABLE_BIML_UPLINK_MB;
    let ratio_ok = (ratio / table_ratio - 1.0).abs() <= RATIO_REL_TOL;

    // The ledger of real runs charges the same formula.
    let dir = tempfile::tempdir().unwrap();
    let mut runs_ok = true;
    let mut run_detail = String::new();
    for strategy in ["kind = \"biml\"\nalpha = 1.25", "kind = \"fa_real\""] {
        let cfg = synthetic_config(strategy, dir.path());
        let (train, test) = load_datasets(cfg.dataset.as_ref().unwrap()).unwrap();
        let model = cfg
            .model_spec()
            .builder(train.feature_len(), train.num_classes)
            .build::<f32>(5)
            .unwrap();
        let (rn, rl) = (model.num_weights() as u64, model.num_weight_layers() as u64);
        let out = run_federated_seed(&cfg, &train, &test, 5).unwrap();
        for row in &out.ledger {
            let (up, down) = match row.strategy {
                StrategyKind::BiMl => {
                    (rn + 32 * rl, ceil_log2(row.participants + 1) * rn + 32 * rl)
                }
                _ => (32 * rn, 32 * rn),
            };
            runs_ok &= row.uplink_per_client == up
                && row.uplink_bits == up * row.participants
                && row.downlink_bits == down;
        }
        run_detail += &format!(
            "{}: {} rounds charged; ",
            out.ledger[0].strategy.label(),
            out.ledger.len()
        );
    }
    report(
        4,
        exact_up && exact_down && ratio_ok && runs_ok,
        &format!(
            "N = {n}, L = {l}: uplink {} vs {} bits per client, ratio {ratio:.2} vs table {table_ratio:.1} (tol {RATIO_REL_TOL}); downlink {} bits/parameter for M = {TABLE_CLIENTS}; {run_detail}ledger formula holds: {runs_ok}",
            bi.uplink_per_client, fa.uplink_per_client, ceil_log2(TABLE_CLIENTS + 1)
        ),
    );
}

// ---------------------------------------------------------------- 5, 6

fn desk_runs(name: &str) -> Vec<Vec<MetricsRow>> {
    let cfg = RunConfig::load(&repo_root().join("configs").join(format!("{name}.toml"))).unwrap();
    let (train, test) = load_datasets(cfg.dataset.as_ref().unwrap()).unwrap();
    cfg.seeds
        .iter()
        .map(|&s| run_federated_seed(&cfg, &train, &test, s).unwrap().rows)
        .collect()
}

fn median_final(runs: &[Vec<MetricsRow>]) -> f64 {
    median(
        runs.iter()
            .map(|r| r.last().unwrap().test_accuracy)
            .collect(),
    )
}

const ORDERING_GAP: f64 = 0.02;

#[test]
fn criterion_05_strategy_ordering() {
    let start = std::time::Instant::now();
    let full = median_final(&desk_runs("desk-full"));
    let biml = median_final(&desk_runs("desk-biml"));
    let up_only = median_final(&desk_runs("desk-up-only"));
    let up_down = median_final(&desk_runs("desk-up-down"));
    let secs = start.elapsed().as_secs_f64();
    let pass = full >= biml && biml >= up_only.max(up_down) + ORDERING_GAP && secs < 600.0;
    report(
        5,
        pass,
        &format!(
            "median final accuracy Full {:.2}, BiML {:.2}, Up-Only {:.2}, Up-Down {:.2} (gap >= {:.0} points), {secs:.0} s",
            100.0 * full,
            100.0 * biml,
            100.0 * up_only,
            100.0 * up_down,
            100.0 * ORDERING_GAP
        ),
    );
}

const HYBRID_SWITCH: usize = 20;
const HYBRID_FINAL_TOL: f64 = 0.015;
/// Smallest drop below the pre-switch accuracy that counts as a dip.
const DIP_MIN_DROP: f64 = 0.01;
/// Rounds after the switch searched for the dip.
const DIP_WINDOW: usize = 3;

#[test]
fn criterion_06_hybrid_recovery() {
    let hybrid = desk_runs("desk-hybrid");
    let real = desk_runs("desk-fa-real");
    let (h, r) = (median_final(&hybrid), median_final(&real));
    let mut before = Vec::new();
    let mut dip = Vec::new();
    for rows in &hybrid {
        let at = |t: usize| rows.iter().find(|m| m.round == t).unwrap();
        before.push(at(HYBRID_SWITCH).test_accuracy);
        let mut lowest = f64::INFINITY;
        for t in HYBRID_SWITCH + 1..=HYBRID_SWITCH + DIP_WINDOW {
            let row = at(t);
            lowest = lowest.min(row.test_accuracy);
            if let Some(a) = row.switch_accuracy {
                lowest = lowest.min(a);
            }
        }
        dip.push(lowest);
    }
    let (before, dip) = (median(before), median(dip));
    let recovered = (h - r).abs() <= HYBRID_FINAL_TOL;
    let visible = dip <= before - DIP_MIN_DROP && dip < h;
    report(
        6,
        recovered && visible,
        &format!(
            "median final hybrid {:.2} vs FA-real {:.2} (tol {:.1} points); accuracy {:.2} at T = {HYBRID_SWITCH}, lowest {:.2} within {DIP_WINDOW} rounds after",
            100.0 * h,
            100.0 * r,
            100.0 * HYBRID_FINAL_TOL,
            100.0 * before,
            100.0 * dip
        ),
    );
}

// ---------------------------------------------------------------- 7

const GEOMETRY_N: usize = 16;
const GEOMETRY_SAMPLES: usize = 10_000;
const MARGIN_AGREEMENT: f64 = 1e-7;

#[test]
fn criterion_07_geometry_audit() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let sgn = |x: f64| if x > 0.0 { 1.0 } else { -1.0 };
    let (mut norm_bad, mut angle_bad) = (0, 0);
    let mut disagreement = 0.0f64;
    for _ in 0..GEOMETRY_SAMPLES {
        let w_bar = DVector::from_fn(GEOMETRY_N, |_, _| rng.random_range(-1.0..=1.0));
        let w_b = w_bar.map(sgn);
        let v_b = loop {
            let v = DVector::from_fn(
                GEOMETRY_N,
                |_, _| if rng.random_bool(0.5) { 1.0 } else { -1.0 },
            );
            if v != w_b {
                break v;
            }
        };
        let k = (0..GEOMETRY_N).filter(|&i| w_b[i] != v_b[i]).count() as f64;
        let (db, da) = (&w_b - &v_b, &w_bar - &v_b);
        let norm_margin = 2.0 * da.norm() - db.norm();
        let cos = (db.dot(&da) / (db.norm() * da.norm())).clamp(-1.0, 1.0);
        let angle_margin = (k / GEOMETRY_N as f64).sqrt().acos() - cos.acos();
        norm_bad += (norm_margin < 0.0) as usize;
        angle_bad += (angle_margin < 0.0) as usize;
        let lib = check_geometry_lemma(&w_bar, &w_b, &v_b).unwrap();
        disagreement = disagreement
            .max((lib.margin_norm - norm_margin).abs())
            .max((lib.margin_angle - angle_margin).abs());
    }
    report(
        7,
        norm_bad == 0 && angle_bad == 0 && disagreement <= MARGIN_AGREEMENT,
        &format!(
            "N = {GEOMETRY_N}, {GEOMETRY_SAMPLES} instances: {norm_bad} norm and {angle_bad} angle violations; library margins agree to {disagreement:.1e}"
        ),
    );
}

// ---------------------------------------------------------------- 8

const DESCENT_PROBLEMS: usize = 100;
const DESCENT_STEPS: usize = 100;

fn oracle_binary_optimum(a: &DMatrix<f64>, c: &DVector<f64>) -> DVector<f64> {
    let n = c.len();
    let mut best = (f64::INFINITY, DVector::zeros(n));
    for mask in 0..(1u64 << n) {
        let w = DVector::from_fn(n, |i, _| {
            if mask >> (n - 1 - i) & 1 == 1 {
                1.0
            } else {
                -1.0
            }
        });
        let d = &w - c;
        let f = 0.5 * d.dot(&(a * &d));
        if f < best.0 {
            best = (f, w);
        }
    }
    best.1
}

fn oracle_phi(lambda: f64, k: f64, xi: f64, beta: f64, n: f64) -> f64 {
    let d = beta - xi;
    let bracket = lambda * (xi * k).sqrt()
        - (xi * (n - k)).sqrt()
        - lambda * (d * (n - k)).sqrt()
        - (k * d).sqrt();
    (lambda - 1.0) * bracket / (beta.powi(3) * lambda * lambda * n * (lambda * lambda + 1.0)).sqrt()
}

fn ols_slope(pts: &[(f64, f64)]) -> f64 {
    let n = pts.len() as f64;
    let (mx, my) = (
        pts.iter().map(|p| p.0).sum::<f64>() / n,
        pts.iter().map(|p| p.1).sum::<f64>() / n,
    );
    let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
    sxy / sxx
}

#[test]
fn criterion_08_descent_audit() {
    let (mut passing, mut descent_bad, mut bracket_bad) = (0, 0, 0);
    let (mut runs_passing, mut slopes_negative) = (0, 0);
    let mut trace_mismatch = 0;
    for id in 0..DESCENT_PROBLEMS {
        let run = suite_run(id, DESCENT_STEPS, 0).unwrap();
        let (a, c) = (&run.problem.a, &run.problem.c);
        let n = c.len();
        assert!(n <= 12);
        let eig = a.clone().symmetric_eigen().eigenvalues;
        let xi = eig.min();
        let beta = eig.max();
        let w_star = oracle_binary_optimum(a, c);
        let eps = (a * (&w_star - c)).norm();
        let eta = run.trace.eta;
        let mut w_bar = DVector::from_row_slice(&run.trace.steps[0].w_bar);
        let mut dists = Vec::new();
        let mut ks = Vec::new();
        let mut any_passing = false;
        for (t, rec) in run.trace.steps.iter().enumerate() {
            let w_b = w_bar.map(|x| if x > 0.0 { 1.0 } else { -1.0 });
            let k = (0..n).filter(|&i| w_b[i] != w_star[i]).count();
            let kf = k as f64;
            let g = a * (&w_b - c);
            let lambda = g.norm() / eps;
            let next = (&w_bar - eta * &g).map(|x| x.clamp(-1.0, 1.0));
            let (d, d_next) = ((&w_bar - &w_star).norm(), (&next - &w_star).norm());
            trace_mismatch += (rec.k != k || (rec.dist_aux - d).abs() > 1e-9 * d.max(1.0)) as usize;
            dists.push((t as f64, d.ln()));
            ks.push(k);
            if k >= 1 && lambda > 1.0 {
                let phi = oracle_phi(lambda, kf, xi, beta, n as f64);
                if eta < phi {
                    any_passing = true;
                    passing += 1;
                    let margin = d * d - 4.0 * (phi - eta) * eta * beta * xi * kf - d_next * d_next;
                    descent_bad += (margin <= 0.0) as usize;
                    let (lo, hi) = ((kf * xi - eps) / eps, (kf * beta + eps) / eps);
                    bracket_bad += !(lo <= lambda && lambda <= hi) as usize;
                }
            }
            if t + 1 == run.trace.steps.len() {
                dists.push(((t + 1) as f64, d_next.ln()));
            }
            w_bar = next;
        }
        if any_passing {
            runs_passing += 1;
            // Fit up to the first step where K attains its minimum.
            let kmin = *ks.iter().min().unwrap();
            let end = ks.iter().position(|&k| k == kmin).unwrap().max(1);
            slopes_negative += (ols_slope(&dists[..=end]) < 0.0) as usize;
        }
    }
    report(
        8,
        descent_bad == 0 && bracket_bad == 0 && slopes_negative == runs_passing && runs_passing > 0 && trace_mismatch == 0,
        &format!(
            "{DESCENT_PROBLEMS} problems, {passing} precondition-passing steps in {runs_passing} runs: {descent_bad} descent violations, λ bracket violated on {bracket_bad} steps, {slopes_negative}/{runs_passing} negative slopes, {trace_mismatch} trace mismatches"
        ),
    );
}

// ---------------------------------------------------------------- 9

const GRAD_SAMPLES: usize = 150;
const GRAD_STEP: f64 = 1e-5;
const GRAD_REL_TOL: f64 = 1e-4;
/// Magnitude below which a gradient is compared in absolute terms; central
/// differences carry roundoff near `1e-11` at this step.
const GRAD_FLOOR: f64 = 1e-6;

#[test]
fn criterion_09_gradient_correctness() {
    let (train, _) = load_mnist_dir(&repo_root().join("data/mnist-subset")).unwrap();
    let idx: Vec<usize> = (0..64).map(|i| i * (train.len() / 64)).collect();
    let sub = train.select(&idx).unwrap();
    let inputs: Array2<f64> = sub.images.mapv(f64::from);
    let batch = Batch::new(inputs, sub.labels.clone()).unwrap();
    let mut details = Vec::new();
    let mut pass = true;
    for (mode, seed) in [(ForwardMode::Binary, 9), (ForwardMode::Real, 10)] {
        let mut model = ModelBuilder::desk_default().build::<f64>(seed).unwrap();
        model.set_mode(mode);
        let samples =
            finite_difference_check(&model, &batch, GRAD_SAMPLES, GRAD_STEP, seed).unwrap();
        let worst = samples
            .iter()
            .map(|s| {
                (s.numeric - s.analytic).abs()
                    / s.analytic.abs().max(s.numeric.abs()).max(GRAD_FLOOR)
            })
            .fold(0.0, f64::max);
        let weights = samples
            .iter()
            .filter(|s| matches!(s.param, GradParam::Weight(_)))
            .count();
        let nonzero = samples
            .iter()
            .filter(|s| s.analytic.abs() > GRAD_FLOOR)
            .count();
        pass &= samples.len() >= 100 && worst <= GRAD_REL_TOL;
        details.push(format!(
            "{mode:?}: {} samples ({weights} weights, {nonzero} above {GRAD_FLOOR:e}), max rel error {worst:.2e}",
            samples.len()
        ));
    }
    report(
        9,
        pass,
        &format!("{} (tol {GRAD_REL_TOL:e})", details.join("; ")),
    );
}

// ---------------------------------------------------------------- 10

fn determinism_config(output_dir: &Path) -> RunConfig {
    let text = format!(
        r#"
schema_version = 1
kind = "federated"
output_dir = "{}"
seeds = [0, 1]

[dataset]
source = "mnist"
path = "data/mnist-subset"
train_per_class = 100
test_per_class = 30

[partition]
scheme = "iid"

[federation]
clients = 10
rounds = 6
participation = 0.5

[strategy]
kind = "biml"
alpha = 1.25
hybrid_switch_round = 3
"#,
        output_dir.display()
    );
    RunConfig::from_toml_str(&text, &repo_root()).unwrap()
}

#[test]
fn criterion_10_determinism() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let mut texts = Vec::new();
    for dir in [a.path(), b.path()] {
        let rep = experiment::run(&determinism_config(dir)).unwrap();
        assert!(rep.failures.is_empty(), "{:?}", rep.failures);
        texts.push(std::fs::read(dir.join(SUMMARY_FILE)).unwrap());
    }
    let per_seed_same = [0u64, 1].iter().all(|s| {
        let f = experiment::metrics_file(*s);
        std::fs::read(a.path().join(&f)).unwrap() == std::fs::read(b.path().join(&f)).unwrap()
    });
    report(
        10,
        texts[0] == texts[1] && per_seed_same && !texts[0].is_empty(),
        &format!(
            "{SUMMARY_FILE} identical: {} ({} bytes); per-seed metrics identical: {per_seed_same}",
            texts[0] == texts[1],
            texts[0].len()
        ),
    );
}
