//! Declarative run configs and reproducible artifacts.
//!
//! A [`RunConfig`] is a TOML file describing one experiment and the seeds it
//! runs under. [`run`] executes it and writes every artifact needed to audit
//! or repeat it into the output directory; [`verify`] recomputes the summary
//! from the per-seed files and [`compare`] tabulates several runs.

mod audit;
mod config;
mod run;
mod summary;

pub use audit::{audit_estimator, oracle_audit, EstimatorAudit, OracleAudit, OracleCase};
pub use config::{
    AuditSpec, DatasetSpec, ExperimentKind, FederationSpec, LabSpec, ModelSpec, RunConfig,
    SCHEMA_VERSION,
};
pub use run::{load_datasets, run, run_federated_seed, MetricsRow, RunReport};
pub use summary::{
    compare, render_comparison, summarize, verify, ComparisonRow, SummaryRow, VerifyReport,
};

/// Per-seed metrics file name.
pub fn metrics_file(seed: u64) -> String {
    format!("metrics-seed{seed}.csv")
}

/// Per-seed partition manifest file name.
pub fn manifest_file(seed: u64) -> String {
    format!("partition-seed{seed}.txt")
}

pub const SUMMARY_FILE: &str = "summary.csv";
pub const LEDGER_FILE: &str = "ledger.csv";
pub const RESOLVED_CONFIG_FILE: &str = "resolved_config.toml";
pub const CURVE_FITS_FILE: &str = "curve_fits.txt";
