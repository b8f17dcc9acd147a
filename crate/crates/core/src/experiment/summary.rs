//! Cross-seed summaries, verification and run comparison.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::config::{ExperimentKind, RunConfig};
use super::run::{LedgerCsvRow, MetricsRow};
use super::{manifest_file, metrics_file, LEDGER_FILE, RESOLVED_CONFIG_FILE, SUMMARY_FILE};
use crate::data::read_manifest;
use crate::error::{Error, Result};
use crate::federation::StrategyKind;

/// Mean and sample standard deviation across seeds for one round.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub round: usize,
    pub strategy: StrategyKind,
    pub seeds: usize,
    pub test_accuracy_mean: f64,
    pub test_accuracy_std: f64,
    pub test_loss_mean: f64,
    pub test_loss_std: f64,
    pub uplink_bits_cum: f64,
    pub downlink_bits_cum: f64,
}

fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// Per-round statistics over seeds, in seed order as given.
pub fn summarize(per_seed: &[(u64, Vec<MetricsRow>)]) -> Result<Vec<SummaryRow>> {
    let Some((_, first)) = per_seed.first() else {
        return Err(Error::InvalidValue("no seeds to summarize".into()));
    };
    for (seed, rows) in per_seed {
        if rows.len() != first.len() {
            return Err(Error::Shape(format!(
                "seed {seed} has {} rounds, expected {}",
                rows.len(),
                first.len()
            )));
        }
    }
    let mut out = Vec::with_capacity(first.len());
    for (i, head) in first.iter().enumerate() {
        let col = |f: fn(&MetricsRow) -> f64| -> Vec<f64> {
            per_seed.iter().map(|(_, r)| f(&r[i])).collect()
        };
        for (seed, rows) in per_seed {
            if rows[i].round != head.round || rows[i].strategy != head.strategy {
                return Err(Error::InvalidValue(format!(
                    "seed {seed} row {i} is round {} {:?}, expected round {} {:?}",
                    rows[i].round, rows[i].strategy, head.round, head.strategy
                )));
            }
        }
        let (acc_m, acc_s) = mean_std(&col(|r| r.test_accuracy));
        let (loss_m, loss_s) = mean_std(&col(|r| r.test_loss));
        out.push(SummaryRow {
            round: head.round,
            strategy: head.strategy,
            seeds: per_seed.len(),
            test_accuracy_mean: acc_m,
            test_accuracy_std: acc_s,
            test_loss_mean: loss_m,
            test_loss_std: loss_s,
            uplink_bits_cum: mean_std(&col(|r| r.uplink_bits_cum as f64)).0,
            downlink_bits_cum: mean_std(&col(|r| r.downlink_bits_cum as f64)).0,
        });
    }
    Ok(out)
}

/// Fixed-precision CSV text of a summary.
pub fn render_summary(rows: &[SummaryRow]) -> String {
    let mut s = String::from(
        "round,strategy,seeds,test_accuracy_mean,test_accuracy_std,test_loss_mean,test_loss_std,uplink_bits_cum,downlink_bits_cum\n",
    );
    for r in rows {
        let _ = writeln!(
            s,
            "{},{},{},{:.6},{:.6},{:.6},{:.6},{:.0},{:.0}",
            r.round,
            r.strategy.key(),
            r.seeds,
            r.test_accuracy_mean,
            r.test_accuracy_std,
            r.test_loss_mean,
            r.test_loss_std,
            r.uplink_bits_cum,
            r.downlink_bits_cum
        );
    }
    s
}

fn read_csv<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    let mut r = csv::Reader::from_path(path)?;
    r.deserialize()
        .map(|row| row.map_err(Error::from))
        .collect()
}

fn read_seeds(dir: &Path, cfg: &RunConfig) -> Result<Vec<(u64, Vec<MetricsRow>)>> {
    cfg.seeds
        .iter()
        .map(|&s| Ok((s, read_csv(&dir.join(metrics_file(s)))?)))
        .collect()
}

/// Outcome of [`verify`].
#[derive(Clone, Debug, Default, PartialEq)]
pub struct VerifyReport {
    pub checks: Vec<String>,
    pub failures: Vec<String>,
}

impl VerifyReport {
    fn check(&mut self, ok: bool, what: String) {
        if ok {
            self.checks.push(what);
        } else {
            self.failures.push(what);
        }
    }
}

/// Recomputes the summary of a federated run directory from its per-seed
/// metrics and checks it byte for byte, checks ledger conservation against
/// the metrics, and re-validates every partition manifest.
pub fn verify(dir: &Path) -> Result<VerifyReport> {
    let cfg = RunConfig::load(&dir.join(RESOLVED_CONFIG_FILE))?;
    let mut rep = VerifyReport::default();
    if cfg.kind != ExperimentKind::Federated {
        for entry in fs::read_dir(dir)? {
            rep.checks
                .push(format!("present: {}", entry?.file_name().to_string_lossy()));
        }
        return Ok(rep);
    }
    let per_seed = read_seeds(dir, &cfg)?;
    let recomputed = render_summary(&summarize(&per_seed)?);
    let stored = fs::read_to_string(dir.join(SUMMARY_FILE))?;
    rep.check(
        recomputed == stored,
        format!(
            "{SUMMARY_FILE} recomputes from {} per-seed files",
            per_seed.len()
        ),
    );
    let ledger: Vec<LedgerCsvRow> = read_csv(&dir.join(LEDGER_FILE))?;
    for (seed, rows) in &per_seed {
        let mine: Vec<&LedgerCsvRow> = ledger.iter().filter(|r| r.seed == *seed).collect();
        let (mut up, mut down) = (0u64, 0u64);
        let conserved = mine.iter().all(|r| {
            up += r.uplink_bits;
            down += r.downlink_bits;
            r.uplink_bits_cum == up
                && r.downlink_bits_cum == down
                && r.uplink_bits == r.uplink_per_client * r.participants
        });
        rep.check(
            conserved,
            format!("seed {seed}: ledger cumulative totals conserved"),
        );
        let matches = mine.len() == rows.len()
            && mine.iter().zip(rows).all(|(l, m)| {
                l.round == m.round
                    && l.uplink_bits_cum == m.uplink_bits_cum
                    && l.downlink_bits_cum == m.downlink_bits_cum
                    && l.participants as usize == m.participants
            });
        rep.check(matches, format!("seed {seed}: ledger agrees with metrics"));
        let manifest = dir.join(manifest_file(*seed));
        let ok = read_manifest(&manifest).and_then(|p| p.validate()).is_ok();
        rep.check(
            ok,
            format!("seed {seed}: partition manifest is a valid partition"),
        );
    }
    Ok(rep)
}

/// Final-round figures of one run directory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub run: String,
    pub strategy: String,
    pub seeds: usize,
    pub rounds: usize,
    pub final_accuracy_mean: f64,
    pub final_accuracy_std: f64,
    pub uplink_bits_cum: f64,
    pub downlink_bits_cum: f64,
}

fn strategy_name(cfg: &RunConfig) -> String {
    match cfg.strategy {
        Some(s) => match s.hybrid_switch_round {
            Some(t) => format!("Hybrid {}/FA-real (T={t})", s.kind.label()),
            None => s.kind.label().to_string(),
        },
        None => "-".into(),
    }
}

/// One row per federated run directory.
pub fn compare(dirs: &[PathBuf]) -> Result<Vec<ComparisonRow>> {
    dirs.iter()
        .map(|dir| {
            let cfg = RunConfig::load(&dir.join(RESOLVED_CONFIG_FILE))?;
            let summary = summarize(&read_seeds(dir, &cfg)?)?;
            let last = summary
                .last()
                .ok_or_else(|| Error::InvalidValue(format!("{} has no rounds", dir.display())))?;
            Ok(ComparisonRow {
                run: dir.file_name().map_or_else(
                    || dir.display().to_string(),
                    |n| n.to_string_lossy().into_owned(),
                ),
                strategy: strategy_name(&cfg),
                seeds: last.seeds,
                rounds: last.round,
                final_accuracy_mean: last.test_accuracy_mean,
                final_accuracy_std: last.test_accuracy_std,
                uplink_bits_cum: last.uplink_bits_cum,
                downlink_bits_cum: last.downlink_bits_cum,
            })
        })
        .collect()
}

fn megabytes(bits: f64) -> f64 {
    bits / 8.0 / 1e6
}

/// Aligned plain-text table of [`compare`] rows.
pub fn render_comparison(rows: &[ComparisonRow]) -> String {
    let header = [
        "run",
        "strategy",
        "seeds",
        "rounds",
        "accuracy",
        "uplink MB",
        "downlink MB",
    ];
    let body: Vec<[String; 7]> = rows
        .iter()
        .map(|r| {
            [
                r.run.clone(),
                r.strategy.clone(),
                r.seeds.to_string(),
                r.rounds.to_string(),
                format!(
                    "{:.2} ± {:.2}",
                    100.0 * r.final_accuracy_mean,
                    100.0 * r.final_accuracy_std
                ),
                format!("{:.3}", megabytes(r.uplink_bits_cum)),
                format!("{:.3}", megabytes(r.downlink_bits_cum)),
            ]
        })
        .collect();
    let mut width = header.map(|h| h.chars().count());
    for row in &body {
        for (w, c) in width.iter_mut().zip(row) {
            *w = (*w).max(c.chars().count());
        }
    }
    let mut out = String::new();
    let mut line = |cells: Vec<&str>| {
        let padded: Vec<String> = cells
            .iter()
            .zip(width)
            .map(|(c, w)| format!("{c}{}", " ".repeat(w - c.chars().count())))
            .collect();
        let _ = writeln!(out, "{}", padded.join("  ").trim_end());
    };
    line(header.to_vec());
    for row in &body {
        line(row.iter().map(String::as_str).collect());
    }
    out
}
