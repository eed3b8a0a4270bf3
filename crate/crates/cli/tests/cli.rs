use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn configs() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs")
}

fn aibc(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_aibc"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn summary_field(dir: &str, key: &str) -> String {
    let text = fs::read_to_string(Path::new(dir.trim()).join("summary.json")).unwrap();
    let line = text
        .lines()
        .find(|l| l.trim_start().starts_with(&format!("\"{key}\"")))
        .unwrap_or_else(|| panic!("no {key} in summary"));
    line.split_once(':')
        .unwrap()
        .1
        .trim()
        .trim_end_matches(',')
        .trim_matches('"')
        .to_string()
}

#[test]
fn gen_train_detect_pipeline() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().to_str().unwrap();
    let cfg = configs().join("gen-train.toml");
    let o = aibc(&["gen", "--config", cfg.to_str().unwrap(), "--out", out, "--quiet"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let data = tmp.path().join("data.csv");
    let labels = fs::read_to_string(tmp.path().join("labels.csv")).unwrap();
    assert_eq!(labels.lines().count(), 101);

    let o = aibc(&["train", "--data", data.to_str().unwrap(), "--out", out, "--quiet"]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stdout(&o).starts_with("rank 5\n"));
    let model = tmp.path().join("model.json");

    let o = aibc(&[
        "detect",
        "--model",
        model.to_str().unwrap(),
        "--data",
        data.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let text = stdout(&o);
    assert_eq!(text.lines().next(), Some("slot,flagged_devices,max_residual_ratio"));
    assert_eq!(text.lines().count(), 101);
}

#[test]
fn detect_on_an_empty_file_prints_nothing() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().to_str().unwrap();
    let cfg = configs().join("gen-train.toml");
    assert!(
        aibc(&["gen", "--config", cfg.to_str().unwrap(), "--out", out, "--quiet"])
            .status
            .success()
    );
    let data = tmp.path().join("data.csv");
    assert!(
        aibc(&["train", "--data", data.to_str().unwrap(), "--out", out, "--quiet"])
            .status
            .success()
    );
    let empty = tmp.path().join("empty.csv");
    fs::write(&empty, "").unwrap();
    let model = tmp.path().join("model.json");
    let o = aibc(&[
        "detect",
        "--model",
        model.to_str().unwrap(),
        "--data",
        empty.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(o.stdout.is_empty());
}

#[test]
fn malformed_csv_is_a_data_error_with_a_line_number() {
    let tmp = tempfile::tempdir().unwrap();
    let bad = tmp.path().join("bad.csv");
    let mut text = String::from("dev0:0,dev0:1\n");
    for t in 0..20 {
        text.push_str(&format!("{t},{}\n", t * 2));
    }
    text.push_str("1.0,abc\n");
    fs::write(&bad, text).unwrap();
    let o = aibc(&[
        "train",
        "--data",
        bad.to_str().unwrap(),
        "--out",
        tmp.path().to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(3));
    assert!(stderr(&o).contains("line 22"), "{}", stderr(&o));
}

#[test]
fn missing_input_is_a_data_error() {
    let o = aibc(&["train", "--data", "/nonexistent/data.csv"]);
    assert_eq!(o.status.code(), Some(3));
}

#[test]
fn invalid_configuration_is_a_validation_error() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("bad.toml");
    fs::write(
        &cfg,
        "seed = 1\nslots = 10\ndevices = 4\ndevice_dims = 1\nrank = 9\nnoise = 0.0\n",
    )
    .unwrap();
    let o = aibc(&[
        "gen",
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        tmp.path().to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("rank"));

    let o = aibc(&["simulate", "--preset", "no-such-preset"]);
    assert_eq!(o.status.code(), Some(2));
    let o = aibc(&["train", "--data", "x.csv", "--epsilon", "1.5"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn simulate_is_reproducible_across_runs_and_thread_counts() {
    let cfg = configs().join("honest.toml");
    let mut outputs = Vec::new();
    for threads in ["1", "4", "4"] {
        let tmp = tempfile::tempdir().unwrap();
        let o = aibc(&[
            "simulate",
            "--config",
            cfg.to_str().unwrap(),
            "--seed",
            "5",
            "--out",
            tmp.path().to_str().unwrap(),
            "--threads",
            threads,
            "--quiet",
        ]);
        assert!(o.status.success(), "{}", stderr(&o));
        let dir = PathBuf::from(stdout(&o).trim());
        outputs.push((
            fs::read(dir.join("slots.csv")).unwrap(),
            fs::read(dir.join("summary.json")).unwrap(),
            fs::read(dir.join("chain.bin")).unwrap(),
        ));
    }
    assert_eq!(outputs[0], outputs[1]);
    assert_eq!(outputs[1], outputs[2]);
}

#[test]
fn attack_attenuation_preset_succeeds_only_with_the_detector() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().to_str().unwrap();
    let on = aibc(&["simulate", "--preset", "attack-attenuation", "--out", out, "--quiet"]);
    assert!(on.status.success(), "{}", stderr(&on));
    let dir = stdout(&on);
    assert_eq!(summary_field(&dir, "outcome"), "success");
    let ratio: f64 = summary_field(&dir, "max_byzantine_active_ratio").parse().unwrap();
    assert!(ratio <= 0.2);

    let off = aibc(&[
        "simulate",
        "--preset",
        "attack-attenuation-no-detector",
        "--out",
        out,
        "--quiet",
    ]);
    assert!(off.status.success(), "{}", stderr(&off));
    assert_eq!(summary_field(&stdout(&off), "outcome"), "consensus-failure");
}

#[test]
fn forty_percent_silent_without_detector_fails() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = configs().join("byzantine-40-no-detector.toml");
    let o = aibc(&[
        "simulate",
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        tmp.path().to_str().unwrap(),
        "--quiet",
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let dir = stdout(&o);
    assert_eq!(summary_field(&dir, "outcome"), "consensus-failure");
    assert_eq!(summary_field(&dir, "successes"), "0");
}

#[test]
fn sweep_and_roc_write_their_tables() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().to_str().unwrap();
    let spec = tmp.path().join("sweep.toml");
    fs::write(
        &spec,
        r#"
seed = 2
trials = 3
[surface]
peers = 10
p_d = { start = 0.0, stop = 1.0, step = 0.5 }
p_fa = { start = 0.0, stop = 0.1, step = 0.05 }
f_raw = { start = 0.0, stop = 0.5, step = 0.25 }
"#,
    )
    .unwrap();
    let o = aibc(&["sweep", "--config", spec.to_str().unwrap(), "--out", out, "--quiet"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let grid = fs::read_to_string(tmp.path().join("grid.csv")).unwrap();
    let surface = fs::read_to_string(tmp.path().join("surface.csv")).unwrap();
    assert_eq!(grid.lines().count(), 1 + 3 * 3 * 3 * 3);
    assert_eq!(surface.lines().count(), 1 + 9);

    let o = aibc(&["roc", "--config", configs().join("roc.toml").to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stdout(&o).starts_with("multiplier,p_d,p_fa\n"));
}
