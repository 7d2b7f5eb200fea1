use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const CONFIG: &str = r#"
[cohort]
n_patients = 160
start_date = "2022-01-01"
end_date = "2022-03-01"

[grid]
n_estimators = [5, 10]
max_depth = [2, 3]
"#;

fn ewi(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ewi"))
        .arg("--data-dir")
        .arg(dir.join("data"))
        .arg("--config")
        .arg(dir.join("ewi.toml"))
        .args(args)
        .env("RUST_LOG", "error")
        .output()
        .expect("binary runs")
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let out = ewi(dir, args);
    assert!(
        out.status.success(),
        "ewi {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

#[test]
fn full_pipeline() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    fs::write(dir.join("ewi.toml"), CONFIG).unwrap();
    let data = dir.join("data");

    ok(dir, &["generate"]);
    assert!(data.join("cohort.jsonl").exists());
    let out = ok(dir, &["ingest"]);
    assert!(out.contains("stays kept"), "{out}");
    assert!(data.join("rejections.jsonl").exists());
    ok(dir, &["featurize"]);
    assert!(data.join("features.tsv.manifest.json").exists());
    ok(dir, &["train"]);
    let model: serde_json::Value = serde_json::from_str(&fs::read_to_string(data.join("model.json")).unwrap()).unwrap();
    assert!(model["trained_on"].is_string());
    let out = ok(dir, &["evaluate"]);
    assert!(out.contains("test AUROC"), "{out}");
    let out = ok(dir, &["ablate", "--kinds", "gbt"]);
    assert!(out.contains("All Modalities"), "{out}");

    ok(dir, &["score", "--from", "2022-02-10", "--to", "2022-02-12"]);
    let day1 = fs::read(data.join("alerts/2022-02-10.jsonl")).unwrap();
    let out = ok(dir, &["score", "--date", "2022-02-10"]);
    assert!(out.contains("unchanged"), "{out}");
    assert_eq!(fs::read(data.join("alerts/2022-02-10.jsonl")).unwrap(), day1);

    let first: serde_json::Value =
        serde_json::from_str(String::from_utf8(day1).unwrap().lines().next().unwrap()).unwrap();
    let key = format!(
        "{}@{}",
        first["patient_day"]["patient_id"].as_str().unwrap(),
        first["patient_day"]["date"].as_str().unwrap()
    );
    let out = ok(dir, &["explain", &key, "-k", "3"]);
    assert_eq!(out.lines().count(), 2 + 3, "{out}");

    let out = ok(dir, &["whatif", "--yellow-level", "0.02"]);
    assert!(out.contains("red or yellow"), "{out}");
    assert!(data.join("whatif.json").exists());
}

#[test]
fn exit_codes() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();

    fs::write(dir.join("ewi.toml"), "[thresholds]\nred_level = 0.01\nred_delta = 0.06\nyellow_level = 0.03\nyellow_delta = 0.015\n").unwrap();
    assert_eq!(ewi(dir, &["generate"]).status.code(), Some(2));

    fs::write(dir.join("ewi.toml"), "").unwrap();
    assert_eq!(ewi(dir, &["featurize"]).status.code(), Some(3));
    assert_eq!(ewi(dir, &["explain", "not-a-key"]).status.code(), Some(2));
    assert_eq!(ewi(dir, &["score"]).status.code(), Some(2));

    fs::create_dir_all(dir.join("data")).unwrap();
    fs::write(dir.join("data/cohort.jsonl"), "garbage\n{also garbage\n").unwrap();
    assert_eq!(ewi(dir, &["ingest"]).status.code(), Some(3));
}
