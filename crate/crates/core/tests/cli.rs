//! Exit-code and determinism contract of the command-line interface.

use std::path::Path;
use std::process::Command;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_drmflow"))
}

fn write_config(dir: &Path, name: &str, body: &str) -> std::path::PathBuf {
    let path = dir.join(name);
    std::fs::write(&path, body).unwrap();
    path
}

const FM_SMALL: &str = "\
experiment = fm-train
seed = 5
out = runs/fm_small
dataset.kind = vector2d
dataset.means = -1,-1; 1,1
dataset.stddev = 0.3
model.hidden = 16
model.blocks = 4
model.time_freqs = 2
model.cond_dim = 4
fm.steps = 30
fm.batch = 16
fm.lr = 0.003
";

#[test]
fn no_arguments_prints_usage_and_exits_1() {
    let out = bin().output().unwrap();
    assert_eq!(out.status.code(), Some(1));
    let text = String::from_utf8_lossy(&out.stderr);
    assert!(text.contains("Usage"), "{text}");
}

#[test]
fn unknown_flag_exits_1() {
    let out = bin().args(["fm-train", "--bogus"]).output().unwrap();
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn missing_config_file_exits_1() {
    let out = bin()
        .args(["fm-train", "--config", "/nonexistent/x.txt"])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn subcommand_config_mismatch_exits_1() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "fm.txt", FM_SMALL);
    let out = bin()
        .arg("align")
        .arg("--config")
        .arg(&cfg)
        .env("DRMFLOW_OUT_ROOT", tmp.path())
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn missing_checkpoint_is_a_runtime_failure() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(
        tmp.path(),
        "drm.txt",
        "experiment = drm-train\nseed = 1\nout = runs/drm\n\
         dataset.kind = vector2d\ndataset.means = -1,-1; 1,1\ndataset.stddev = 0.3\n\
         model.hidden = 16\nmodel.blocks = 4\nmodel.time_freqs = 2\nmodel.cond_dim = 4\n\
         drm.head = mlp\ndrm.d_p = 8\ndrm.fm_checkpoint = runs/absent/fm.json\n",
    );
    let out = bin()
        .arg("drm-train")
        .arg("--config")
        .arg(&cfg)
        .env("DRMFLOW_OUT_ROOT", tmp.path())
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn valid_run_exits_0_and_writes_checkpoint() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "fm.txt", FM_SMALL);
    let out = bin()
        .arg("fm-train")
        .arg("--config")
        .arg(&cfg)
        .env("DRMFLOW_OUT_ROOT", tmp.path())
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(tmp.path().join("runs/fm_small/checkpoints/fm.json").exists());
    assert!(tmp.path().join("runs/fm_small/manifest.json").exists());
}

#[test]
fn seed_override_is_deterministic() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "fm.txt", FM_SMALL);
    let mut curves = Vec::new();
    for root in ["a", "b"] {
        let out = bin()
            .arg("fm-train")
            .arg("--config")
            .arg(&cfg)
            .args(["--seed", "7"])
            .env("DRMFLOW_OUT_ROOT", tmp.path().join(root))
            .output()
            .unwrap();
        assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
        curves.push(
            std::fs::read(tmp.path().join(root).join("runs/fm_small/metrics/fm_train.csv")).unwrap(),
        );
    }
    assert_eq!(curves[0], curves[1]);
    // The override actually changes the run relative to the config seed.
    let out = bin()
        .arg("fm-train")
        .arg("--config")
        .arg(&cfg)
        .env("DRMFLOW_OUT_ROOT", tmp.path().join("c"))
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(0));
    let base = std::fs::read(tmp.path().join("c/runs/fm_small/metrics/fm_train.csv")).unwrap();
    assert_ne!(curves[0], base);
}
