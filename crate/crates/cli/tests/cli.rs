use std::io::{BufRead, BufReader};
use std::path::Path;
use std::process::{Child, Command, Output, Stdio};

use serde_json::Value;

const BIN: &str = env!("CARGO_BIN_EXE_survae");

/// Fast training flags; the default epoch budget is far too slow for a test.
const QUICK: [&str; 6] = ["--max-epochs", "12", "--patience", "5", "--mc-samples-eval", "4"];

fn run(dir: &Path, args: &[&str]) -> Output {
    Command::new(BIN)
        .args(args)
        .current_dir(dir)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let out = run(dir, args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn read_json(path: &Path) -> Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

fn pipeline(dir: &Path) {
    ok(dir, &["synth", "--n", "600", "--seed", "7", "--missing-rate", "0.1"]);
    ok(dir, &["impute", "--seed", "7"]);
    let mut train = vec!["train", "--seed", "7"];
    train.extend(QUICK);
    ok(dir, &train);
    ok(dir, &["eval", "--samples", "64", "--seed", "7"]);
    ok(dir, &["predict", "--covariate", "x01=0.2", "--t1", "intensive_chemo", "--samples", "256", "--seed", "7"]);
}

const OUTPUTS: [&str; 7] = [
    "data.csv",
    "schema.toml",
    "imputed.csv",
    "model.json",
    "elbo_trace.tsv",
    "eval_report.json",
    "predict_report.json",
];

#[test]
fn full_pipeline_is_byte_reproducible() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    pipeline(a.path());
    pipeline(b.path());
    for name in OUTPUTS {
        let x = std::fs::read(a.path().join(name)).unwrap();
        let y = std::fs::read(b.path().join(name)).unwrap();
        assert!(x == y, "{name} differs between runs");
    }
    let report = read_json(&a.path().join("eval_report.json"));
    for key in ["vae_train_c", "vae_val_c", "cox_train_c", "cox_val_c"] {
        let c = report[key].as_f64().unwrap_or_else(|| panic!("{key} missing"));
        assert!((0.0..=1.0).contains(&c), "{key} = {c}");
    }
}

#[test]
fn one_epoch_trace() {
    let dir = tempfile::tempdir().unwrap();
    ok(dir.path(), &["synth", "--n", "80", "--seed", "1"]);
    ok(dir.path(), &["train", "--max-epochs", "1", "--patience", "0", "--mc-samples-eval", "2"]);
    let trace = std::fs::read_to_string(dir.path().join("elbo_trace.tsv")).unwrap();
    let lines: Vec<&str> = trace.lines().collect();
    assert_eq!(lines.len(), 2);
    assert_eq!(lines[0], "epoch\ttrain_elbo\tval_elbo");
    let fields: Vec<&str> = lines[1].split('\t').collect();
    assert_eq!(fields.len(), 3);
    assert_eq!(fields[0], "0");
    assert!(fields[1].parse::<f64>().unwrap().is_finite());
}

fn trained(dir: &Path) {
    ok(dir, &["synth", "--n", "120", "--seed", "3"]);
    ok(dir, &["train", "--max-epochs", "4", "--patience", "2", "--mc-samples-eval", "2"]);
}

#[test]
fn equal_arms_print_zero_delta() {
    let dir = tempfile::tempdir().unwrap();
    trained(dir.path());
    let stdout = ok(dir.path(), &["predict", "--t0", "radiation", "--t1", "0,1", "--samples", "128"]);
    assert!(stdout.contains("delta 0.0000"), "{stdout}");
    assert!(stdout.contains("do-not-intensify"), "{stdout}");
    let report = read_json(&dir.path().join("predict_report.json"));
    assert_eq!(report["contrast"]["delta"], 0.0);
    for key in ["expected_survival", "median_survival", "curve"] {
        assert!(!report["predict"][key].is_null(), "{key}");
    }
}

#[test]
fn every_flag_shows_a_default() {
    let dir = tempfile::tempdir().unwrap();
    for sub in ["synth", "impute", "train", "eval", "predict", "serve"] {
        let help = ok(dir.path(), &[sub, "--help"]);
        let options = help.split("Options:").nth(1).unwrap();
        // Each option entry starts with its flag; continuation lines are
        // indented further.
        let mut entries: Vec<String> = Vec::new();
        for line in options.lines() {
            let trimmed = line.trim_start();
            if trimmed.starts_with("--") || trimmed.starts_with("-h") {
                entries.push(trimmed.to_owned());
            } else if let Some(last) = entries.last_mut() {
                last.push(' ');
                last.push_str(trimmed);
            }
        }
        for entry in entries.iter().filter(|e| !e.contains("--help")) {
            assert!(entry.contains("[default:"), "{sub}: {entry}");
        }
        assert!(entries.len() > 2, "{sub}");
    }
}

#[test]
fn exit_codes_distinguish_failures() {
    let dir = tempfile::tempdir().unwrap();
    let usage = run(dir.path(), &["train", "--no-such-flag"]);
    assert_eq!(usage.status.code(), Some(2));

    let missing = run(dir.path(), &["train", "--data", "absent.csv"]);
    assert_eq!(missing.status.code(), Some(3));
    let line = String::from_utf8(missing.stderr).unwrap();
    let last: Value = serde_json::from_str(line.lines().last().unwrap()).unwrap();
    assert_eq!(last["exit_code"], 3);
    assert!(last["error"].as_str().unwrap().contains("absent.csv"));

    ok(dir.path(), &["synth", "--n", "80", "--seed", "2"]);
    let bad_config = run(dir.path(), &["train", "--max-epochs", "5", "--patience", "5"]);
    assert_eq!(bad_config.status.code(), Some(2));
    let diverged = run(
        dir.path(),
        &["train", "--max-epochs", "3", "--patience", "1", "--learning-rate", "1e9"],
    );
    assert_eq!(diverged.status.code(), Some(4));
}

#[test]
fn config_file_values_yield_to_flags() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(
        dir.path().join("run.toml"),
        "seed = 5\nn = 90\n\n[train]\nmax_epochs = 4\npatience = 1\nmc_samples_eval = 2\n",
    )
    .unwrap();
    ok(dir.path(), &["synth", "--config", "run.toml"]);
    let data = std::fs::read_to_string(dir.path().join("data.csv")).unwrap();
    assert_eq!(data.lines().count(), 91);
    ok(dir.path(), &["train", "--config", "run.toml", "--max-epochs", "2"]);
    let trace = std::fs::read_to_string(dir.path().join("elbo_trace.tsv")).unwrap();
    assert_eq!(trace.lines().count(), 3);
    let model = read_json(&dir.path().join("model.json"));
    assert_eq!(model["training"]["seed"], 5);
    assert_eq!(model["training"]["config"]["patience"], 1);

    std::fs::write(dir.path().join("bad.toml"), "[train]\nwarp_speed = 9\n").unwrap();
    assert_eq!(run(dir.path(), &["train", "--config", "bad.toml"]).status.code(), Some(2));
}

struct Server(Child);

impl Drop for Server {
    fn drop(&mut self) {
        let _ = self.0.kill();
        let _ = self.0.wait();
    }
}

#[test]
fn remote_predict_matches_local() {
    let dir = tempfile::tempdir().unwrap();
    trained(dir.path());
    let mut child = Command::new(BIN)
        .args(["serve", "--model", "model.json", "--port", "0"])
        .current_dir(dir.path())
        .env("RUST_LOG", "warn")
        .stdout(Stdio::piped())
        .stderr(Stdio::null())
        .spawn()
        .unwrap();
    let stdout = child.stdout.take().unwrap();
    let server = Server(child);
    let mut line = String::new();
    BufReader::new(stdout).read_line(&mut line).unwrap();
    let url = line.trim().strip_prefix("listening on ").expect("address line").to_owned();

    let common = ["--covariate", "b02=1", "--t1", "1,1", "--samples", "200", "--seed", "9"];
    let mut local = vec!["predict", "--report", "local.json"];
    local.extend(common);
    let mut remote = vec!["predict", "--report", "remote.json", "--server", &url];
    remote.extend(common);
    ok(dir.path(), &local);
    ok(dir.path(), &remote);
    assert_eq!(
        std::fs::read(dir.path().join("local.json")).unwrap(),
        std::fs::read(dir.path().join("remote.json")).unwrap()
    );
    drop(server);
}
