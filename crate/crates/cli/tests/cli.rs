use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

const BIN: &str = env!("CARGO_BIN_EXE_classpoison");

const DATASET: &str = r#"
[dataset]
kind = "blobs"
k_classes = 4
dim = 6
n_per_class = 60
center_separation = 0.5
noise_sigma = 0.05
seed = 3

[model]
hidden = [16]

[pretrain]
epochs = 15
batch_size = 16
lr = 0.2
decay_factor = 0.9
decay_every = 100
"#;

fn write_config(dir: &Path, name: &str, attack: &str) -> PathBuf {
    let path = dir.join(name);
    fs::write(&path, format!("{DATASET}\n[attack]\n{attack}\n")).unwrap();
    path
}

fn run(args: &[&str]) -> Output {
    Command::new(BIN).args(args).output().expect("binary runs")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn pretrain(dir: &Path, config: &Path, out: &str) -> PathBuf {
    let out = dir.join(out);
    let o = run(&["pretrain", "--config", s(config), "--seed", "1", "--out", s(&out)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    out.join("checkpoint.json")
}

fn attack(config: &Path, ckpt: &Path, out: &Path) -> Output {
    run(&["attack", "--config", s(config), "--checkpoint", s(ckpt), "--seed", "2", "--out", s(out)])
}

#[test]
fn pretrain_is_deterministic_and_logs_epochs() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "as.toml", "mode = \"as\"\nsupplanter = 0");
    let a = pretrain(tmp.path(), &cfg, "a");
    let b = pretrain(tmp.path(), &cfg, "b");
    assert_eq!(fs::read(&a).unwrap(), fs::read(&b).unwrap());
    let log = fs::read_to_string(tmp.path().join("a/pretrain_log.csv")).unwrap();
    let lines: Vec<&str> = log.lines().collect();
    assert_eq!(lines[0], "epoch,lr,train_loss,test_accuracy");
    assert_eq!(lines.len(), 1 + 15);
}

#[test]
fn as_run_writes_all_artifacts_and_report_summarizes() {
    let tmp = tempfile::tempdir().unwrap();
    let as_cfg = write_config(tmp.path(), "as.toml", "mode = \"as\"\nsupplanter = 0\niterations = 7");
    let fl_cfg = write_config(tmp.path(), "fl.toml", "mode = \"fl\"\ntarget = 0\niterations = 7");
    let ckpt = pretrain(tmp.path(), &as_cfg, "base");
    let runs = tmp.path().join("runs");

    let o = attack(&as_cfg, &ckpt, &runs.join("as"));
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    for f in ["curves.csv", "report.csv", "report.json", "poisons.json", "run.json"] {
        assert!(runs.join("as").join(f).is_file(), "missing {f}");
    }
    let curves = fs::read_to_string(runs.join("as/curves.csv")).unwrap();
    assert_eq!(curves.lines().count(), 1 + 7);
    assert_eq!(curves.lines().next().unwrap(), "iteration,lr,error,ctt");

    // re-running overwrites byte-identically
    let first = fs::read(runs.join("as/curves.csv")).unwrap();
    assert!(attack(&as_cfg, &ckpt, &runs.join("as")).status.success());
    assert_eq!(fs::read(runs.join("as/curves.csv")).unwrap(), first);

    let single = run(&["report", "--out", s(&runs.join("as"))]);
    assert!(single.status.success());
    assert_eq!(String::from_utf8_lossy(&single.stdout).lines().count(), 2);

    assert!(attack(&fl_cfg, &ckpt, &runs.join("fl")).status.success());
    let o = run(&["report", "--out", s(&runs)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let table = String::from_utf8_lossy(&o.stdout).to_string();
    let lines: Vec<&str> = table.lines().collect();
    assert_eq!(lines.len(), 3, "{table}");
    assert!(lines[0].contains("ctt"));
    assert!(lines.iter().any(|l| l.starts_with("as ")));
    assert!(lines.iter().any(|l| l.starts_with("fl ")));
    let merged = fs::read_to_string(runs.join("merged_curves.csv")).unwrap();
    assert_eq!(merged.lines().count(), 1 + 7 + 7);
}

#[test]
fn ov_report_has_class_rows_plus_overall() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(
        tmp.path(),
        "ov.toml",
        "mode = \"ov\"\nvictim = 1\npoison_label = 2\nepochs = 2",
    );
    let ckpt = pretrain(tmp.path(), &cfg, "base");
    let out = tmp.path().join("ov");
    let o = attack(&cfg, &ckpt, &out);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let report = fs::read_to_string(out.join("report.csv")).unwrap();
    assert_eq!(report.lines().count(), 1 + 4 + 1);
    assert!(report.lines().last().unwrap().starts_with("overall,"));
    let curves = fs::read_to_string(out.join("curves.csv")).unwrap();
    assert_eq!(curves.lines().next().unwrap().split(',').count(), 3 + 4);
}

#[test]
fn missing_dataset_path_exits_2_naming_the_key() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("idx.toml");
    fs::write(
        &cfg,
        r#"
[dataset]
kind = "idx"
train_images = "missing/train-images"
train_labels = "missing/train-labels"
test_images = "missing/test-images"
test_labels = "missing/test-labels"

[model]
hidden = [8]

[pretrain]
epochs = 1
batch_size = 8
lr = 0.1

[attack]
mode = "as"
supplanter = 0
"#,
    )
    .unwrap();
    let o = run(&["pretrain", "--config", s(&cfg), "--out", s(&tmp.path().join("x"))]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("dataset.train_images"));
}

#[test]
fn baseline_target_equal_to_victim_is_rejected() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(
        tmp.path(),
        "fl.toml",
        "mode = \"fl\"\nscenario = \"ov\"\nvictim = 1\ntarget = 1",
    );
    let o = run(&["pretrain", "--config", s(&cfg), "--out", s(&tmp.path().join("x"))]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("attack.target"));
}

#[test]
fn checkpoint_mismatch_is_a_runtime_error() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "as.toml", "mode = \"as\"\nsupplanter = 0\niterations = 2");
    let ckpt = pretrain(tmp.path(), &cfg, "base");
    let wider = tmp.path().join("wide.toml");
    fs::write(
        &wider,
        fs::read_to_string(&cfg).unwrap().replace("hidden = [16]", "hidden = [20]"),
    )
    .unwrap();
    let o = attack(&wider, &ckpt, &tmp.path().join("run"));
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("layer widths"));
}

#[test]
fn report_on_empty_directory_fails() {
    let tmp = tempfile::tempdir().unwrap();
    let o = run(&["report", "--out", s(tmp.path())]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn lr_override_zero_keeps_ctt_at_zero() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(
        tmp.path(),
        "as.toml",
        "mode = \"as\"\nsupplanter = 0\niterations = 4\nlr_override = 0.0",
    );
    let ckpt = pretrain(tmp.path(), &cfg, "base");
    let out = tmp.path().join("run");
    assert!(attack(&cfg, &ckpt, &out).status.success());
    let curves = fs::read_to_string(out.join("curves.csv")).unwrap();
    for line in curves.lines().skip(1) {
        assert_eq!(line.rsplit(',').next().unwrap(), "0", "{line}");
    }
}
