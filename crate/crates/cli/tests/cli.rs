use std::path::Path;
use std::process::{Command, Output};

fn riskmin(args: &[&str], dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_riskmin"))
        .args(args)
        .current_dir(dir)
        .output()
        .expect("binary runs")
}

fn write_config(dir: &Path, body: &str) {
    std::fs::write(dir.join("config.json"), body).unwrap();
}

const AGG: &str = r#"{
  "schemaVersion": 1,
  "subcommand": "aggregation-lb",
  "baseSeed": 9,
  "outputPath": "out/agg.csv",
  "format": "csv",
  "parameters": { "functions": [2], "sample_sizes": [2], "reps": 10000 }
}"#;

#[test]
fn validate_reports_violations_with_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    write_config(dir.path(), &AGG.replace("\"baseSeed\": 9,", ""));
    let out = riskmin(&["validate", "--config", "config.json"], dir.path());
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("baseSeed"), "{err}");

    write_config(dir.path(), AGG);
    let out = riskmin(&["validate", "--config", "config.json"], dir.path());
    assert_eq!(out.status.code(), Some(0));
}

#[test]
fn missing_config_is_io_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = riskmin(&["run", "--config", "absent.json"], dir.path());
    assert_eq!(out.status.code(), Some(4));
}

#[test]
fn aggregation_run_matches_exact_value_and_repeats() {
    let dir = tempfile::tempdir().unwrap();
    write_config(dir.path(), AGG);
    let first = riskmin(&["run", "--config", "config.json"], dir.path());
    assert_eq!(first.status.code(), Some(0), "{}", String::from_utf8_lossy(&first.stderr));
    let csv_a = std::fs::read(dir.path().join("out/agg.csv")).unwrap();
    let manifest_a = std::fs::read(dir.path().join("out/agg.csv.manifest.json")).unwrap();

    let text = String::from_utf8(csv_a.clone()).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some("N,n,reps,delta,estimate,stderr,ratio"));
    let fields: Vec<f64> = lines.next().unwrap().split(',').map(|f| f.parse().unwrap()).collect();
    // N = n = 2: δ = ¼·sqrt(ln 2 / 2), and 5 of the 16 bit tables select the
    // wrong function, so the exact mean excess is 5δ/16.
    let delta = 0.25 * (2f64.ln() / 2.0).sqrt();
    let exact = 5.0 * delta / 16.0;
    assert!((fields[4] - exact).abs() <= 4.0 * fields[5]);

    let second = riskmin(&["run", "--config", "config.json"], dir.path());
    assert_eq!(second.status.code(), Some(0));
    assert_eq!(std::fs::read(dir.path().join("out/agg.csv")).unwrap(), csv_a);
    assert_eq!(std::fs::read(dir.path().join("out/agg.csv.manifest.json")).unwrap(), manifest_a);
}

#[test]
fn selection_oracle_summary() {
    let dir = tempfile::tempdir().unwrap();
    write_config(
        dir.path(),
        r#"{"schemaVersion": 1, "subcommand": "selection-oracle", "baseSeed": 3,
            "outputPath": "sel.csv", "format": "csv", "parameters": {"instances": 1000}}"#,
    );
    let out = riskmin(&["run", "--config", "config.json"], dir.path());
    assert_eq!(out.status.code(), Some(0));
    let summary = std::fs::read_to_string(dir.path().join("sel.csv.summary.csv")).unwrap();
    let mut lines = summary.lines();
    assert_eq!(
        lines.next(),
        Some("instances,conditionsHold,oracleHolds,implicationFailures,singleClassFailures")
    );
    let row: Vec<&str> = lines.next().unwrap().split(',').collect();
    assert_eq!(row[0], "1000");
    assert_eq!(row[3], "0");
    let per_instance = std::fs::read_to_string(dir.path().join("sel.csv")).unwrap();
    assert!(per_instance.starts_with("instance,conditionsHold,lhs,rhs,oracleHolds\n"));
    assert_eq!(per_instance.lines().count(), 1001);
}

#[test]
fn every_subcommand_is_deterministic() {
    let bodies = [
        r#""subcommand": "selection-oracle", "parameters": {"instances": 50}"#,
        r#""subcommand": "aggregation-lb", "parameters": {"functions": [4], "sample_sizes": [10], "reps": 500}"#,
        r#""subcommand": "sparse-audit", "parameters": {"problem": {"points": 60, "atoms": 6}, "audit": {"sample_sizes": [40], "reps": 3}}"#,
        r#""subcommand": "complexity-curve", "parameters": {"sample_size": 10}"#,
    ];
    for body in bodies {
        for format in ["csv", "json"] {
            let config = format!(
                r#"{{"schemaVersion": 1, "baseSeed": 11, "outputPath": "r.out", "format": "{format}", {body}}}"#
            );
            let runs: Vec<Vec<u8>> = (0..2)
                .map(|_| {
                    let dir = tempfile::tempdir().unwrap();
                    write_config(dir.path(), &config);
                    let out = riskmin(&["run", "--config", "config.json"], dir.path());
                    assert_eq!(out.status.code(), Some(0), "{body}: {}", String::from_utf8_lossy(&out.stderr));
                    let mut bytes = std::fs::read(dir.path().join("r.out")).unwrap();
                    bytes.extend(std::fs::read(dir.path().join("r.out.manifest.json")).unwrap());
                    bytes
                })
                .collect();
            assert_eq!(runs[0], runs[1], "{body} / {format}");
        }
    }
}

#[test]
fn solver_failures_exit_3() {
    let dir = tempfile::tempdir().unwrap();
    write_config(
        dir.path(),
        r#"{"schemaVersion": 1, "subcommand": "sparse-audit", "baseSeed": 1, "outputPath": "s.csv",
            "parameters": {"problem": {"points": 60, "atoms": 6},
                           "audit": {"sample_sizes": [40], "reps": 2, "solver": {"max_iters": 1, "tol": 1e-15}}}}"#,
    );
    let out = riskmin(&["run", "--config", "config.json"], dir.path());
    assert_eq!(out.status.code(), Some(3));
    let csv = std::fs::read_to_string(dir.path().join("s.csv")).unwrap();
    assert!(csv.lines().nth(1).unwrap().contains("false"));
}
