//! The `mmfs` binary end to end on a small synthetic configuration.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

const SMALL: &str = r#"
master_seed = 3
arms = ["mcae_oracle"]
architecture = "compact"

[data]
n_per_class = 40

[grid]
batch_sizes = [16, 32]
seeds = [0, 1]

[train]
max_epochs = 1

[episodes]
count = 20
"#;

fn mmfs(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mmfs")).args(args).output().expect("binary runs")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn write_config(dir: &Path, text: &str) -> PathBuf {
    let path = dir.join("config.toml");
    fs::write(&path, format!("out_dir = {:?}\n{text}", dir.join("out"))).unwrap();
    path
}

fn stage(cmd: &str, cfg: &Path) -> Output {
    mmfs(&[cmd, "--config", cfg.to_str().unwrap()])
}

fn checkpoints(dir: &Path) -> Vec<String> {
    let mut names: Vec<String> = fs::read_dir(dir.join("out/train"))
        .map(|rd| {
            rd.map(|e| e.unwrap().file_name().to_string_lossy().into_owned())
                .filter(|n| n.ends_with(".ckpt"))
                .collect()
        })
        .unwrap_or_default();
    names.sort();
    names
}

#[test]
fn missing_data_path_names_the_field() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "[data]\nsource = \"files\"\n");
    let out = stage("prepare", &cfg);
    assert!(!out.status.success());
    let err = stderr(&out);
    assert!(err.starts_with("error kind=config field=data.speech "), "{err}");
}

#[test]
fn nonexistent_data_file_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let text = "[data]\nsource = \"files\"\nspeech = \"/nonexistent/digits.mfca\"\nspeech_labels = \"/nonexistent/l.tsv\"\nimages = \"/nonexistent/i\"\nimage_labels = \"/nonexistent/il\"\n";
    let out = stage("prepare", &write_config(dir.path(), text));
    assert_eq!(out.status.code(), Some(1));
    let err = stderr(&out);
    assert!(err.starts_with("error kind=config field=data.speech "), "{err}");
    assert!(err.contains("/nonexistent/digits.mfca"), "{err}");
    assert_eq!(err.lines().count(), 1);
}

#[test]
fn unknown_key_and_bad_value_are_named() {
    let dir = tempfile::tempdir().unwrap();
    let out = stage("prepare", &write_config(dir.path(), "[data]\nnoize = 0.1\n"));
    assert!(!out.status.success());
    assert!(stderr(&out).contains("field=noize"), "{}", stderr(&out));

    let out = stage("prepare", &write_config(dir.path(), "arms = [\"mtriplet_sideways\"]\n"));
    assert!(!out.status.success());
    assert!(stderr(&out).contains("field=arms"), "{}", stderr(&out));

    let out = mmfs(&["prepare", "--config", write_config(dir.path(), "").to_str().unwrap(), "--grid", "16;0"]);
    assert!(!out.status.success());
    assert!(stderr(&out).contains("field=grid"), "{}", stderr(&out));
}

#[test]
fn stages_out_of_order_name_the_missing_stage() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), SMALL);
    let out = stage("mine", &cfg);
    assert!(!out.status.success());
    assert!(stderr(&out).contains("run `prepare` first"), "{}", stderr(&out));

    assert!(stage("prepare", &cfg).status.success());
    assert!(stage("mine", &cfg).status.success());
    let out = stage("evaluate", &cfg);
    assert!(!out.status.success());
    let err = stderr(&out);
    assert!(err.contains("mcae_oracle_b16_s0.ckpt"), "{err}");
}

#[test]
fn grid_training_resumes_and_evaluates() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), SMALL);
    for cmd in ["prepare", "mine", "train"] {
        let out = stage(cmd, &cfg);
        assert!(out.status.success(), "{cmd}: {}", stderr(&out));
    }
    assert_eq!(
        checkpoints(dir.path()),
        ["mcae_oracle_b16_s0.ckpt", "mcae_oracle_b16_s1.ckpt", "mcae_oracle_b32_s0.ckpt", "mcae_oracle_b32_s1.ckpt"]
    );
    // One log row per epoch run, after the provenance and header lines.
    let log = fs::read_to_string(dir.path().join("out/train/mcae_oracle_b16_s0.log.tsv")).unwrap();
    assert_eq!(log.lines().count(), 3);

    // A second run retrains nothing; a deleted cell is the only one redone.
    let kept = fs::read(dir.path().join("out/train/mcae_oracle_b32_s1.ckpt")).unwrap();
    let out = stage("train", &cfg);
    assert!(out.status.success());
    assert!(!stderr(&out).contains("train:"), "{}", stderr(&out));
    fs::remove_file(dir.path().join("out/train/mcae_oracle_b16_s1.ckpt")).unwrap();
    let out = stage("train", &cfg);
    let err = stderr(&out);
    assert_eq!(err.matches("train:").count(), 1, "{err}");
    assert!(err.contains("mcae_oracle b16 s1"), "{err}");
    assert_eq!(fs::read(dir.path().join("out/train/mcae_oracle_b32_s1.ckpt")).unwrap(), kept);

    let out = stage("evaluate", &cfg);
    assert!(out.status.success(), "{}", stderr(&out));
    let table = String::from_utf8_lossy(&out.stdout);
    assert!(table.contains("mcae_oracle "), "{table}");
    assert!(table.contains("mcae_oracle_indirect "), "{table}");
    let report = dir.path().join("out/report");
    for name in [
        "summary.json",
        "grid_mcae_oracle.csv",
        "grid_mcae_oracle_indirect.csv",
        "confusion_mcae_oracle.csv",
        "confusion_mcae_oracle_indirect.csv",
    ] {
        assert!(report.join(name).exists(), "{name}");
    }
    let grid = fs::read_to_string(report.join("grid_mcae_oracle.csv")).unwrap();
    assert_eq!(grid.lines().filter(|l| !l.starts_with('#')).count(), 5);

    // `report` rebuilds the same files from stored results.
    let before = fs::read(report.join("summary.json")).unwrap();
    assert!(stage("report", &cfg).status.success());
    assert_eq!(fs::read(report.join("summary.json")).unwrap(), before);
}

#[test]
fn changed_training_settings_make_checkpoints_stale() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), SMALL);
    let out = mmfs(&["run", "--config", cfg.to_str().unwrap(), "--grid", "16:0"]);
    assert!(out.status.success(), "{}", stderr(&out));
    let changed = write_config(dir.path(), &SMALL.replace("max_epochs = 1", "max_epochs = 2"));
    let out = mmfs(&["evaluate", "--config", changed.to_str().unwrap(), "--grid", "16:0"]);
    assert!(!out.status.success());
    let err = stderr(&out);
    assert!(err.starts_with("error kind=state "), "{err}");
    assert!(err.contains("rerun `"), "{err}");
}
