//! Exit codes and output of the `bifl` binary.

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn bifl(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_bifl"))
        .args(args)
        .output()
        .unwrap()
}

fn write_config(dir: &Path, name: &str, strategy: &str) -> String {
    let text = format!(
        r#"
schema_version = 1
kind = "federated"
output_dir = "out-{name}"
seeds = [0]

[dataset]
source = "synthetic"
classes = 3
dims = 8
train_per_class = 40
test_per_class = 10
data_seed = 2

[partition]
scheme = "iid"

[model]
hidden = [8]

[federation]
clients = 2
rounds = 3

[strategy]
{strategy}
"#
    );
    let path = dir.join(format!("{name}.toml"));
    fs::write(&path, text).unwrap();
    path.to_str().unwrap().to_string()
}

#[test]
fn run_verify_and_compare() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "biml", "kind = \"biml\"\nalpha = 1.25");
    let out = bifl(&["run", &cfg]);
    assert_eq!(
        out.status.code(),
        Some(0),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    assert!(String::from_utf8_lossy(&out.stdout).contains("summary.csv"));

    let run_dir = dir.path().join("out-biml");
    let run_dir = run_dir.to_str().unwrap();
    let out = bifl(&["verify", run_dir]);
    assert_eq!(out.status.code(), Some(0));
    assert!(String::from_utf8_lossy(&out.stdout).contains("ok   summary.csv"));

    let out = bifl(&["compare", run_dir]);
    assert_eq!(out.status.code(), Some(0));
    assert!(String::from_utf8_lossy(&out.stdout).contains("BiFL-BiML"));

    // A tampered summary fails verification.
    let summary = Path::new(run_dir).join("summary.csv");
    let text = fs::read_to_string(&summary).unwrap();
    fs::write(&summary, text.replacen("0.", "1.", 1)).unwrap();
    let out = bifl(&["verify", run_dir]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("FAIL"));
}

#[test]
fn mixing_parameter_on_biml_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(
        dir.path(),
        "bad",
        "kind = \"biml\"\nalpha = 1.25\nbeta = 0.3",
    );
    let out = bifl(&["run", &cfg]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("strategy.beta"));
}

#[test]
fn missing_inputs_are_usage_errors() {
    assert_eq!(
        bifl(&["run", "/nonexistent/config.toml"]).status.code(),
        Some(2)
    );
    assert_eq!(bifl(&["verify", "/nonexistent/run"]).status.code(), Some(2));
    assert_eq!(bifl(&["fit-curve", "--m", "1"]).status.code(), Some(2));
    assert_eq!(bifl(&["bogus"]).status.code(), Some(2));
}

#[test]
fn audit_failures_exit_with_one() {
    let out = bifl(&[
        "audit-estimator",
        "--m",
        "6",
        "--samples",
        "1000",
        "--step",
        "0.001",
        "--tolerance",
        "0.002",
    ]);
    assert_eq!(out.status.code(), Some(1));
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("oracle: 10 tallies"), "{stdout}");
    assert!(String::from_utf8_lossy(&out.stderr).contains("FAIL"));
}
