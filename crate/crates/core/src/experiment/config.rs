//! The run-config schema.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::binary_net::{ModelBuilder, TrainConfig};
use crate::data::PartitionScheme;
use crate::error::{Error, Result};
use crate::federation::{StrategyConfig, StrategyKind};
use crate::mlpu::{EstimatorMode, U_MAX};

/// The only schema version this build reads.
pub const SCHEMA_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ExperimentKind {
    Federated,
    ConvergenceLab,
    EstimatorAudit,
}

impl ExperimentKind {
    fn name(self) -> &'static str {
        match self {
            ExperimentKind::Federated => "federated",
            ExperimentKind::ConvergenceLab => "convergence-lab",
            ExperimentKind::EstimatorAudit => "estimator-audit",
        }
    }
}

/// Where samples come from. Relative paths resolve against the directory
/// holding the config file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "snake_case", deny_unknown_fields)]
pub enum DatasetSpec {
    /// A directory with the four canonical MNIST IDX files, optionally
    /// reduced to the first samples of each class.
    Mnist {
        path: PathBuf,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        train_per_class: Option<usize>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        test_per_class: Option<usize>,
    },
    /// Gaussian blobs; the data is fixed by `data_seed`, not by the run seed.
    Synthetic {
        classes: usize,
        dims: usize,
        train_per_class: usize,
        test_per_class: usize,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        separation: Option<f64>,
        #[serde(default)]
        data_seed: u64,
    },
}

/// Hidden widths of a binary MLP: each hidden layer is binary dense, batch
/// norm and tanh; the output layer is binary dense with softmax.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    pub hidden: Vec<usize>,
}

impl Default for ModelSpec {
    fn default() -> Self {
        Self { hidden: vec![64] }
    }
}

impl ModelSpec {
    pub fn builder(&self, input_len: usize, classes: usize) -> ModelBuilder {
        let mut b = ModelBuilder::new(&[input_len]);
        for &h in &self.hidden {
            b = b.dense(h, true).batch_norm().tanh();
        }
        b.dense(classes, true).softmax()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FederationSpec {
    /// Number of clients `M`.
    pub clients: usize,
    pub rounds: usize,
    /// Fraction `λ` of clients uploading each round.
    #[serde(default = "one")]
    pub participation: f64,
    #[serde(default = "one_usize")]
    pub local_epochs: usize,
    #[serde(default)]
    pub estimator: EstimatorMode,
}

fn one() -> f64 {
    1.0
}

fn one_usize() -> usize {
    1
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LabSpec {
    pub geometry_dim: usize,
    pub geometry_samples: usize,
    pub descent_problems: usize,
    pub descent_steps: usize,
    pub probe_clients: usize,
    pub probe_trials: usize,
    pub probe_alphas: Vec<f64>,
}

impl Default for LabSpec {
    fn default() -> Self {
        Self {
            geometry_dim: 16,
            geometry_samples: 10_000,
            descent_problems: 100,
            descent_steps: 100,
            probe_clients: 10,
            probe_trials: 10_000,
            probe_alphas: (0..=20).map(|i| 1.0 + 0.05 * i as f64).collect(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AuditSpec {
    pub clients: Vec<usize>,
    pub oracle_step: f64,
    pub oracle_tolerance: f64,
    pub contraction_samples: usize,
    pub fit_error_threshold: f64,
}

impl Default for AuditSpec {
    fn default() -> Self {
        Self {
            clients: vec![10, 50, 100],
            oracle_step: 1e-4,
            oracle_tolerance: 1e-3,
            contraction_samples: 100_000,
            fit_error_threshold: 0.05,
        }
    }
}

/// One experiment and the seeds it runs under.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub schema_version: u32,
    pub kind: ExperimentKind,
    pub output_dir: PathBuf,
    pub seeds: Vec<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dataset: Option<DatasetSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub partition: Option<PartitionScheme>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub model: Option<ModelSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub federation: Option<FederationSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub strategy: Option<StrategyConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub train: Option<TrainConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lab: Option<LabSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub audit: Option<AuditSpec>,
}

/// Removes `.` and resolves `..` components without touching the file
/// system.
fn normalize(p: &Path) -> PathBuf {
    use std::path::Component;
    let mut out = PathBuf::new();
    for c in p.components() {
        match c {
            Component::CurDir => {}
            Component::ParentDir => {
                if !out.pop() {
                    out.push("..");
                }
            }
            other => out.push(other),
        }
    }
    out
}

fn config_err(field: &str, msg: impl std::fmt::Display) -> Error {
    Error::Config(format!("{field}: {msg}"))
}

fn require<'a, T>(v: &'a Option<T>, field: &str, kind: ExperimentKind) -> Result<&'a T> {
    v.as_ref().ok_or_else(|| {
        config_err(
            field,
            format_args!("section required for kind = \"{}\"", kind.name()),
        )
    })
}

fn forbid<T>(v: &Option<T>, field: &str, kind: ExperimentKind) -> Result<()> {
    match v {
        Some(_) => Err(config_err(
            field,
            format_args!("not used by kind = \"{}\"", kind.name()),
        )),
        None => Ok(()),
    }
}

impl RunConfig {
    /// Parses and validates, resolving relative paths against `base_dir`.
    pub fn from_toml_str(text: &str, base_dir: &Path) -> Result<Self> {
        let mut cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.resolve_paths(base_dir);
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        let base = path
            .parent()
            .filter(|p| !p.as_os_str().is_empty())
            .unwrap_or(Path::new("."));
        Self::from_toml_str(&text, base)
    }

    fn resolve_paths(&mut self, base: &Path) {
        let base = std::fs::canonicalize(base).unwrap_or_else(|_| base.to_path_buf());
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = normalize(&base.join(&*p));
            }
        };
        fix(&mut self.output_dir);
        if let Some(DatasetSpec::Mnist { path, .. }) = &mut self.dataset {
            fix(path);
        }
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(format!("cannot serialize config: {e}")))
    }

    pub fn model_spec(&self) -> ModelSpec {
        self.model.clone().unwrap_or_default()
    }

    pub fn train_config(&self) -> TrainConfig {
        self.train.clone().unwrap_or_default()
    }

    pub fn validate(&self) -> Result<()> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(config_err(
                "schema_version",
                format_args!("expected {SCHEMA_VERSION}, found {}", self.schema_version),
            ));
        }
        if self.seeds.is_empty() {
            return Err(config_err("seeds", "must list at least one seed"));
        }
        let mut sorted = self.seeds.clone();
        sorted.sort_unstable();
        if sorted.windows(2).any(|w| w[0] == w[1]) {
            return Err(config_err("seeds", "must not repeat"));
        }
        let kind = self.kind;
        match kind {
            ExperimentKind::Federated => {
                forbid(&self.lab, "lab", kind)?;
                forbid(&self.audit, "audit", kind)?;
                self.validate_dataset(require(&self.dataset, "dataset", kind)?)?;
                let scheme = require(&self.partition, "partition", kind)?;
                let fed = require(&self.federation, "federation", kind)?;
                let strategy = require(&self.strategy, "strategy", kind)?;
                strategy.validate()?;
                self.train_config().validate()?;
                if fed.clients == 0 {
                    return Err(config_err("federation.clients", "must be >= 1"));
                }
                if fed.rounds == 0 {
                    return Err(config_err("federation.rounds", "must be >= 1"));
                }
                if !(fed.participation > 0.0 && fed.participation <= 1.0) {
                    return Err(config_err("federation.participation", "must lie in (0, 1]"));
                }
                if fed.local_epochs == 0 {
                    return Err(config_err("federation.local_epochs", "must be >= 1"));
                }
                if let Some(t) = strategy.hybrid_switch_round {
                    if t >= fed.rounds {
                        return Err(config_err(
                            "strategy.hybrid_switch_round",
                            format_args!(
                                "{t} must be smaller than federation.rounds = {}",
                                fed.rounds
                            ),
                        ));
                    }
                }
                if let PartitionScheme::NonIid { classes_per_client } = scheme {
                    if *classes_per_client == 0 {
                        return Err(config_err("partition.classes_per_client", "must be >= 1"));
                    }
                }
                if strategy.kind == StrategyKind::FaReal
                    && fed.estimator != EstimatorMode::default()
                {
                    log::warn!("federation.estimator has no effect for FA-real");
                }
                if self.model_spec().hidden.contains(&0) {
                    return Err(config_err("model.hidden", "widths must be >= 1"));
                }
            }
            ExperimentKind::ConvergenceLab => {
                for (v, f) in [
                    (self.dataset.is_some(), "dataset"),
                    (self.partition.is_some(), "partition"),
                    (self.model.is_some(), "model"),
                    (self.federation.is_some(), "federation"),
                    (self.strategy.is_some(), "strategy"),
                    (self.train.is_some(), "train"),
                    (self.audit.is_some(), "audit"),
                ] {
                    if v {
                        return Err(config_err(
                            f,
                            format_args!("not used by kind = \"{}\"", kind.name()),
                        ));
                    }
                }
                let lab = self.lab.clone().unwrap_or_default();
                if lab.geometry_dim == 0 || lab.geometry_samples == 0 {
                    return Err(config_err(
                        "lab.geometry_dim",
                        "dimension and sample count must be >= 1",
                    ));
                }
                if lab.descent_problems == 0 || lab.descent_steps < 2 {
                    return Err(config_err(
                        "lab.descent_steps",
                        "need >= 1 problem and >= 2 steps",
                    ));
                }
                if lab.probe_alphas.is_empty()
                    || lab
                        .probe_alphas
                        .iter()
                        .any(|a| !(a.is_finite() && *a > 0.0))
                {
                    return Err(config_err(
                        "lab.probe_alphas",
                        "must be a non-empty list of positive values",
                    ));
                }
                if lab.probe_clients == 0 || lab.probe_trials == 0 {
                    return Err(config_err(
                        "lab.probe_clients",
                        "clients and trials must be >= 1",
                    ));
                }
            }
            ExperimentKind::EstimatorAudit => {
                for (v, f) in [
                    (self.dataset.is_some(), "dataset"),
                    (self.partition.is_some(), "partition"),
                    (self.model.is_some(), "model"),
                    (self.federation.is_some(), "federation"),
                    (self.strategy.is_some(), "strategy"),
                    (self.train.is_some(), "train"),
                    (self.lab.is_some(), "lab"),
                ] {
                    if v {
                        return Err(config_err(
                            f,
                            format_args!("not used by kind = \"{}\"", kind.name()),
                        ));
                    }
                }
                let a = self.audit.clone().unwrap_or_default();
                if a.clients.is_empty() || a.clients.iter().any(|&m| m < 2) {
                    return Err(config_err("audit.clients", "must list client counts >= 2"));
                }
                if !(a.oracle_step > 0.0 && a.oracle_step < U_MAX) {
                    return Err(config_err("audit.oracle_step", "must be positive"));
                }
                if a.contraction_samples == 0 {
                    return Err(config_err("audit.contraction_samples", "must be >= 1"));
                }
            }
        }
        Ok(())
    }

    fn validate_dataset(&self, ds: &DatasetSpec) -> Result<()> {
        match ds {
            DatasetSpec::Mnist {
                train_per_class,
                test_per_class,
                ..
            } => {
                if *train_per_class == Some(0) || *test_per_class == Some(0) {
                    return Err(config_err(
                        "dataset.train_per_class",
                        "must be >= 1 when given",
                    ));
                }
            }
            DatasetSpec::Synthetic {
                classes,
                dims,
                train_per_class,
                test_per_class,
                separation,
                ..
            } => {
                if *classes < 2 {
                    return Err(config_err("dataset.classes", "must be >= 2"));
                }
                if *dims == 0 || *train_per_class == 0 || *test_per_class == 0 {
                    return Err(config_err(
                        "dataset.dims",
                        "dims and per-class counts must be >= 1",
                    ));
                }
                if let Some(s) = separation {
                    if !(s.is_finite() && *s > 0.0) {
                        return Err(config_err("dataset.separation", "must be positive"));
                    }
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const FED: &str = r#"
schema_version = 1
kind = "federated"
output_dir = "out"
seeds = [0, 1]

[dataset]
source = "synthetic"
classes = 3
dims = 4
train_per_class = 20
test_per_class = 5

[partition]
scheme = "iid"

[federation]
clients = 3
rounds = 2

[strategy]
kind = "biml"
alpha = 1.25
"#;

    #[test]
    fn parses_and_resolves_paths() {
        let cfg = RunConfig::from_toml_str(FED, Path::new("/base")).unwrap();
        assert_eq!(cfg.output_dir, PathBuf::from("/base/out"));
        let nested = RunConfig::from_toml_str(
            &FED.replace("\"out\"", "\"../runs/./x\""),
            Path::new("/base/cfg"),
        )
        .unwrap();
        assert_eq!(nested.output_dir, PathBuf::from("/base/runs/x"));
        assert_eq!(cfg.federation.as_ref().unwrap().participation, 1.0);
        let again =
            RunConfig::from_toml_str(&cfg.to_toml().unwrap(), Path::new("/elsewhere")).unwrap();
        assert_eq!(again, cfg);
    }

    #[test]
    fn beta_on_biml_names_the_field() {
        let text = FED.replace("alpha = 1.25", "alpha = 1.25\nbeta = 0.3");
        let err = RunConfig::from_toml_str(&text, Path::new("."))
            .unwrap_err()
            .to_string();
        assert!(err.contains("strategy.beta"), "{err}");
    }

    #[test]
    fn schema_errors_name_fields() {
        let cases = [
            (
                FED.replace("schema_version = 1", "schema_version = 2"),
                "schema_version",
            ),
            (FED.replace("seeds = [0, 1]", "seeds = []"), "seeds"),
            (FED.replace("seeds = [0, 1]", "seeds = [3, 3]"), "seeds"),
            (FED.replace("rounds = 2", "rounds = 0"), "federation.rounds"),
            (
                FED.replace("[partition]\nscheme = \"iid\"", ""),
                "partition",
            ),
            (FED.replace("rounds = 2", "rounds = 2\nbogus = 1"), "bogus"),
            (format!("{FED}\n[lab]\n"), "lab"),
            (
                FED.replace("alpha = 1.25", "alpha = 1.25\nhybrid_switch_round = 2"),
                "hybrid_switch_round",
            ),
        ];
        for (text, field) in cases {
            let err = RunConfig::from_toml_str(&text, Path::new("."))
                .unwrap_err()
                .to_string();
            assert!(err.contains(field), "expected {field} in {err}");
        }
    }

    #[test]
    fn lab_and_audit_defaults() {
        let lab =
            "schema_version = 1\nkind = \"convergence-lab\"\noutput_dir = \"o\"\nseeds = [1]\n";
        let cfg = RunConfig::from_toml_str(lab, Path::new(".")).unwrap();
        assert_eq!(cfg.kind, ExperimentKind::ConvergenceLab);
        let audit = lab.replace("convergence-lab", "estimator-audit") + "[audit]\nclients = [10]\n";
        let cfg = RunConfig::from_toml_str(&audit, Path::new(".")).unwrap();
        assert_eq!(cfg.audit.unwrap().clients, vec![10]);
        let bad = lab.to_string() + "[strategy]\nkind = \"full\"\n";
        assert!(RunConfig::from_toml_str(&bad, Path::new("."))
            .unwrap_err()
            .to_string()
            .contains("strategy"));
    }

    #[test]
    fn model_spec_builds_desk_network() {
        let specs = ModelSpec::default().builder(784, 10).specs().unwrap();
        assert_eq!(specs, ModelBuilder::desk_default().specs().unwrap());
    }
}
