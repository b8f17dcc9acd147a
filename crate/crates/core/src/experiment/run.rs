//! Executes a [`RunConfig`] and writes its artifacts.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::config::{DatasetSpec, ExperimentKind, RunConfig};
use super::summary::{render_summary, summarize};
use super::{
    audit_estimator, manifest_file, metrics_file, CURVE_FITS_FILE, LEDGER_FILE,
    RESOLVED_CONFIG_FILE, SUMMARY_FILE,
};
use crate::convergence_lab::{
    descent_suite, geometry_audit, probe_theorem2, write_findings_csv, AlphaChoice, DescentSummary,
    GeometryAudit, MNIST_LIKE_GRID,
};
use crate::data::{
    load_mnist_dir, partition_iid, partition_noniid, partition_unbalanced, synth_gaussian_with,
    Dataset, Partition, PartitionScheme, DEFAULT_SEPARATION,
};
use crate::error::{Error, Result};
use crate::federation::{Federation, FederationConfig, LedgerRow, RoundResult, StrategyKind};
use crate::mlpu::{write_fit_cache, CurveFit};

/// One row of a per-seed metrics file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub round: usize,
    pub strategy: StrategyKind,
    pub test_accuracy: f64,
    pub test_loss: f64,
    pub uplink_bits_cum: u64,
    pub downlink_bits_cum: u64,
    pub participants: usize,
    pub seed: u64,
    pub train_loss: f64,
    /// Accuracy right after a change of forward mode, before training.
    pub switch_accuracy: Option<f64>,
}

impl MetricsRow {
    fn from_result(r: &RoundResult, seed: u64) -> Self {
        Self {
            round: r.round,
            strategy: r.strategy,
            test_accuracy: r.test_accuracy,
            test_loss: r.test_loss,
            uplink_bits_cum: r.uplink_bits_cum,
            downlink_bits_cum: r.downlink_bits_cum,
            participants: r.participants,
            seed,
            train_loss: r.train_loss,
            switch_accuracy: r.switch_accuracy,
        }
    }
}

/// A ledger row tagged with its seed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub(super) struct LedgerCsvRow {
    pub seed: u64,
    pub round: usize,
    pub strategy: StrategyKind,
    pub participants: u64,
    pub uplink_per_client: u64,
    pub uplink_bits: u64,
    pub downlink_bits: u64,
    pub uplink_bits_cum: u64,
    pub downlink_bits_cum: u64,
}

impl LedgerCsvRow {
    fn new(seed: u64, r: &LedgerRow) -> Self {
        Self {
            seed,
            round: r.round,
            strategy: r.strategy,
            participants: r.participants,
            uplink_per_client: r.uplink_per_client,
            uplink_bits: r.uplink_bits,
            downlink_bits: r.downlink_bits,
            uplink_bits_cum: r.uplink_bits_cum,
            downlink_bits_cum: r.downlink_bits_cum,
        }
    }
}

/// What a run produced and which checks failed.
#[derive(Clone, Debug, PartialEq)]
pub struct RunReport {
    pub kind: ExperimentKind,
    pub output_dir: PathBuf,
    pub files: Vec<PathBuf>,
    /// Failed checks; empty on success.
    pub failures: Vec<String>,
    /// Human-readable result lines.
    pub notes: Vec<String>,
}

/// Train and test sets described by `spec`.
pub fn load_datasets(spec: &DatasetSpec) -> Result<(Dataset, Dataset)> {
    match spec {
        DatasetSpec::Mnist {
            path,
            train_per_class,
            test_per_class,
        } => {
            let (mut train, mut test) = load_mnist_dir(path)?;
            if let Some(k) = train_per_class {
                train = train.stratified_head(*k)?;
            }
            if let Some(k) = test_per_class {
                test = test.stratified_head(*k)?;
            }
            Ok((train, test))
        }
        DatasetSpec::Synthetic {
            classes,
            dims,
            train_per_class,
            test_per_class,
            separation,
            data_seed,
        } => {
            let all = synth_gaussian_with(
                *classes,
                train_per_class + test_per_class,
                *dims,
                separation.unwrap_or(DEFAULT_SEPARATION),
                *data_seed,
            )?;
            let (mut tr, mut te) = (Vec::new(), Vec::new());
            for members in all.class_indices() {
                tr.extend_from_slice(&members[..*train_per_class]);
                te.extend_from_slice(&members[*train_per_class..]);
            }
            tr.sort_unstable();
            te.sort_unstable();
            Ok((all.select(&tr)?, all.select(&te)?))
        }
    }
}

fn make_partition(
    scheme: PartitionScheme,
    train: &Dataset,
    m: usize,
    seed: u64,
) -> Result<Partition> {
    match scheme {
        PartitionScheme::Iid => partition_iid(train, m, seed),
        PartitionScheme::NonIid { classes_per_client } => {
            partition_noniid(train, m, classes_per_client, seed)
        }
        PartitionScheme::Unbalanced => partition_unbalanced(train, m, seed),
    }
}

/// Output of one federated seed.
pub struct SeedOutcome {
    pub rows: Vec<MetricsRow>,
    pub partition: Partition,
    pub ledger: Vec<LedgerRow>,
    pub fits: Vec<CurveFit>,
}

/// Runs one seed of a federated config on preloaded data. The seed drives
/// the partition, the model initialization and every client generator.
pub fn run_federated_seed(
    cfg: &RunConfig,
    train: &Dataset,
    test: &Dataset,
    seed: u64,
) -> Result<SeedOutcome> {
    let fed = cfg
        .federation
        .as_ref()
        .ok_or_else(|| Error::Config("federation: section missing".into()))?;
    let strategy = cfg
        .strategy
        .ok_or_else(|| Error::Config("strategy: section missing".into()))?;
    let scheme = cfg
        .partition
        .ok_or_else(|| Error::Config("partition: section missing".into()))?;
    let partition = make_partition(scheme, train, fed.clients, seed)?;
    let template = cfg
        .model_spec()
        .builder(train.feature_len(), train.num_classes)
        .build::<f32>(seed)?;
    let fcfg = FederationConfig {
        strategy,
        train: cfg.train_config(),
        participation: fed.participation,
        local_epochs: fed.local_epochs,
        estimator: fed.estimator,
        seed,
    };
    let mut federation = Federation::new(&template, train, &partition, test.clone(), fcfg)?;
    let results = federation.run(fed.rounds)?;
    Ok(SeedOutcome {
        rows: results
            .iter()
            .map(|r| MetricsRow::from_result(r, seed))
            .collect(),
        partition,
        ledger: federation.ledger().rows().to_vec(),
        fits: federation.estimator().fits(),
    })
}

fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

/// Executes `cfg`, writing artifacts into `cfg.output_dir`.
pub fn run(cfg: &RunConfig) -> Result<RunReport> {
    cfg.validate()?;
    fs::create_dir_all(&cfg.output_dir)?;
    let mut report = RunReport {
        kind: cfg.kind,
        output_dir: cfg.output_dir.clone(),
        files: Vec::new(),
        failures: Vec::new(),
        notes: Vec::new(),
    };
    let resolved = cfg.output_dir.join(RESOLVED_CONFIG_FILE);
    fs::write(&resolved, cfg.to_toml()?)?;
    report.files.push(resolved);
    match cfg.kind {
        ExperimentKind::Federated => run_federated(cfg, &mut report)?,
        ExperimentKind::ConvergenceLab => run_lab(cfg, &mut report)?,
        ExperimentKind::EstimatorAudit => run_audit(cfg, &mut report)?,
    }
    Ok(report)
}

fn run_federated(cfg: &RunConfig, report: &mut RunReport) -> Result<()> {
    let (train, test) = load_datasets(cfg.dataset.as_ref().expect("validated"))?;
    let out = &cfg.output_dir;
    let mut per_seed = Vec::new();
    let mut ledger = Vec::new();
    let mut fits: Vec<CurveFit> = Vec::new();
    for &seed in &cfg.seeds {
        log::info!("seed {seed}: starting");
        let o = run_federated_seed(cfg, &train, &test, seed)?;
        let path = out.join(metrics_file(seed));
        write_csv(&path, &o.rows)?;
        report.files.push(path);
        let path = out.join(manifest_file(seed));
        o.partition.write_manifest(&path)?;
        report.files.push(path);
        ledger.extend(o.ledger.iter().map(|r| LedgerCsvRow::new(seed, r)));
        for f in o.fits {
            if !fits.iter().any(|g| g.m == f.m) {
                fits.push(f);
            }
        }
        if let Some(last) = o.rows.last() {
            report.notes.push(format!(
                "seed {seed}: final test accuracy {:.4}",
                last.test_accuracy
            ));
        }
        per_seed.push((seed, o.rows));
    }
    let path = out.join(LEDGER_FILE);
    write_csv(&path, &ledger)?;
    report.files.push(path);
    let summary = summarize(&per_seed)?;
    let path = out.join(SUMMARY_FILE);
    fs::write(&path, render_summary(&summary))?;
    report.files.push(path);
    if !fits.is_empty() {
        fits.sort_by(|a, b| a.m.total_cmp(&b.m));
        let path = out.join(CURVE_FITS_FILE);
        write_fit_cache(&path, &fits)?;
        report.files.push(path);
    }
    Ok(())
}

/// Everything the lab produced for one seed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct LabSeedReport {
    seed: u64,
    geometry: GeometryAudit,
    descent: DescentSummary,
    alpha_choices: Vec<AlphaChoice>,
}

fn lab_failures(r: &LabSeedReport) -> Vec<String> {
    let (g, d) = (&r.geometry, &r.descent);
    let mut f = Vec::new();
    let s = r.seed;
    if g.norm_violations > 0 {
        f.push(format!(
            "seed {s}: norm bound violated on {} samples",
            g.norm_violations
        ));
    }
    if g.angle_violations > 0 {
        f.push(format!(
            "seed {s}: angle bound violated on {} samples",
            g.angle_violations
        ));
    }
    if d.descent_violations > 0 {
        f.push(format!(
            "seed {s}: descent inequality violated on {} passing steps",
            d.descent_violations
        ));
    }
    if d.printed_bracket_violations > 0 {
        f.push(format!(
            "seed {s}: printed λ bracket violated on {} of {} passing steps",
            d.printed_bracket_violations, d.passing_steps
        ));
    }
    if d.derived_bracket_violations > 0 {
        f.push(format!(
            "seed {s}: 2√K λ bracket violated on {} passing steps",
            d.derived_bracket_violations
        ));
    }
    if d.identity_failures > 0 {
        f.push(format!(
            "seed {s}: ‖W^b − W*‖² != 4K on {} steps",
            d.identity_failures
        ));
    }
    if d.negative_slopes < d.runs_with_passing_steps {
        f.push(format!(
            "seed {s}: log-distance slope not negative on {} of {} passing runs",
            d.runs_with_passing_steps - d.negative_slopes,
            d.runs_with_passing_steps
        ));
    }
    f
}

fn run_lab(cfg: &RunConfig, report: &mut RunReport) -> Result<()> {
    let lab = cfg.lab.clone().unwrap_or_default();
    for &seed in &cfg.seeds {
        let geometry = geometry_audit(lab.geometry_dim, lab.geometry_samples, seed)?;
        let (descent, traces) = descent_suite(lab.descent_problems, lab.descent_steps, seed)?;
        let probe = probe_theorem2(
            lab.probe_clients,
            &MNIST_LIKE_GRID,
            &lab.probe_alphas,
            lab.probe_trials,
            seed,
        )?;
        let path = cfg.output_dir.join(format!("findings-seed{seed}.csv"));
        write_findings_csv(&path, &traces)?;
        report.files.push(path);
        let r = LabSeedReport {
            seed,
            geometry,
            descent,
            alpha_choices: probe.best,
        };
        if r.descent.min_phi_discrepancy.is_finite() {
            report.notes.push(format!(
                "seed {seed}: the two φ forms differ (min |Δ| = {:.3e}); φ_cos/φ_rad = β within {:.1e}",
                r.descent.min_phi_discrepancy, r.descent.max_phi_ratio_error
            ));
        }
        report.failures.extend(lab_failures(&r));
        let path = cfg.output_dir.join(format!("lab-seed{seed}.toml"));
        fs::write(
            &path,
            toml::to_string(&r)
                .map_err(|e| Error::InvalidState(format!("cannot serialize lab report: {e}")))?,
        )?;
        report.files.push(path);
    }
    Ok(())
}

#[derive(Serialize)]
struct AuditFile<'a> {
    audits: &'a [super::EstimatorAudit],
}

fn run_audit(cfg: &RunConfig, report: &mut RunReport) -> Result<()> {
    let spec = cfg.audit.clone().unwrap_or_default();
    let mut audits = Vec::new();
    for &seed in &cfg.seeds {
        for &m in &spec.clients {
            let a = audit_estimator(m, spec.oracle_step, spec.contraction_samples, seed)?;
            report.notes.push(format!(
                "seed {seed}, M = {m}: oracle max error {:.2e} over {} tallies, {} contraction violations",
                a.oracle.max_error, a.oracle.cases, a.contraction.violations
            ));
            report
                .failures
                .extend(a.failures(spec.oracle_tolerance, spec.fit_error_threshold));
            audits.push(a);
        }
    }
    let path = cfg.output_dir.join("audit.toml");
    let text = toml::to_string(&AuditFile { audits: &audits })
        .map_err(|e| Error::InvalidState(format!("cannot serialize audit: {e}")))?;
    fs::write(&path, text)?;
    report.files.push(path);
    let mut fits: Vec<CurveFit> = Vec::new();
    for f in audits.iter().filter_map(|a| a.fit.clone()) {
        if !fits.iter().any(|g| g.m == f.m) {
            fits.push(f);
        }
    }
    if !fits.is_empty() {
        let path = cfg.output_dir.join(CURVE_FITS_FILE);
        write_fit_cache(&path, &fits)?;
        report.files.push(path);
    }
    Ok(())
}
