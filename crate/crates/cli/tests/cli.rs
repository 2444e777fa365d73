use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use adadiff_core::mapper::{Prior, TrainMode};
use adadiff_core::phantom::Dataset;
use adadiff_core::schedule::DiffusionSchedule;

const SMALL: &str = r#"
[data]
subjects = 3
contrasts = ["T1", "PD"]
size = 32
slices_per_subject = 1

[mapper]
image_size = 32
base_channels = 4
channel_mult = [1, 2]
blocks_per_stage = 1
attention_stages = [1]
decoder_attention_stages = []
z_dim = 4
z_embed_dim = 8
z_mlp_layers = 2
time_embed_dim = 8
disc_channels = [4, 4]
batch_size = 2
epochs = 1

[recon]
iterations = 2
"#;

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_adadiff"));
    c.env_remove("ADADIFF_OUT");
    c
}

fn run(dir: &Path, args: &[&str]) -> Output {
    let cfg = dir.join("small.toml");
    if !cfg.exists() {
        fs::write(&cfg, SMALL).unwrap();
    }
    let mut c = bin();
    c.args(args)
        .arg("--config")
        .arg(&cfg)
        .arg("--out")
        .arg(dir.join("out"))
        .arg("--reproducible");
    c.output().unwrap()
}

fn ok(o: Output) -> Output {
    assert!(o.status.success(), "stderr: {}", String::from_utf8_lossy(&o.stderr));
    o
}

fn files(root: &Path) -> Vec<PathBuf> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push(p);
            }
        }
    }
    out.sort();
    out
}

fn assert_same_tree(a: &Path, b: &Path) {
    let fa = files(a);
    let fb = files(b);
    assert_eq!(fa.len(), fb.len());
    for (x, y) in fa.iter().zip(&fb) {
        assert_eq!(x.strip_prefix(a).unwrap(), y.strip_prefix(b).unwrap());
        assert_eq!(fs::read(x).unwrap(), fs::read(y).unwrap(), "{} differs", x.display());
    }
}

#[test]
fn default_dataset_has_120_slices_and_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    for name in ["a", "b"] {
        ok(bin().args(["gen-data", "--out"]).arg(dir.path().join(name)).output().unwrap());
    }
    let data = Dataset::open(&dir.path().join("a/data")).unwrap();
    assert_eq!(data.manifest().slice_count(), 120);
    assert_eq!(files(&dir.path().join("a/data")).iter().filter(|p| p.extension().is_some_and(|e| e == "cfl")).count(), 120);
    assert!(dir.path().join("a/data/config.toml").exists());
    assert_same_tree(&dir.path().join("a/data"), &dir.path().join("b/data"));
}

#[test]
fn output_root_comes_from_environment() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path().join("env-root");
    ok(bin()
        .args(["mask", "--set", "data.size=32"])
        .env("ADADIFF_OUT", &root)
        .output()
        .unwrap());
    assert!(root.join("mask/mask.png").exists());
}

#[test]
fn configuration_errors_exit_with_code_2() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(dir.path(), &["gen-data", "--set", "data.bogus=1"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("bogus"));
    let o = run(dir.path(), &["gen-data", "--set", "data.subjects=2"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn corrupted_manifest_exits_with_code_3() {
    let dir = tempfile::tempdir().unwrap();
    ok(run(dir.path(), &["gen-data"]));
    fs::write(dir.path().join("out/data/manifest.json"), "{ not json").unwrap();
    let o = run(dir.path(), &["train"]);
    assert_eq!(o.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&o.stderr).contains("manifest"));
}

#[test]
fn mask_accel_follows_config_override() {
    let dir = tempfile::tempdir().unwrap();
    ok(run(dir.path(), &["mask", "--set", "operator.accel=8"]));
    let info: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.path().join("out/mask/mask.json")).unwrap()).unwrap();
    assert_eq!(info["sampled"], 32 * 32 / 8);
    assert_eq!(info["accel"], 8.0);
}

#[test]
fn zero_epoch_training_writes_the_initialisation() {
    let dir = tempfile::tempdir().unwrap();
    ok(run(dir.path(), &["gen-data"]));
    ok(run(dir.path(), &["train", "--set", "mapper.epochs=0", "--set", "train.seed=4"]));
    let p = Prior::load(&dir.path().join("out/prior-adversarial/prior.bin")).unwrap();
    let cfg = p.config.clone();
    let fresh = Prior::new(cfg, DiffusionSchedule::standard(), TrainMode::Adversarial, 4).unwrap();
    assert_eq!(p.to_bytes(), fresh.to_bytes());
    assert_eq!(
        fs::read_to_string(dir.path().join("out/prior-adversarial/trace.csv")).unwrap().lines().count(),
        1
    );
}

#[test]
fn resumed_training_matches_an_uninterrupted_run() {
    let dir = tempfile::tempdir().unwrap();
    ok(run(dir.path(), &["gen-data"]));
    ok(run(dir.path(), &["train", "--variant", "l1", "--set", "mapper.epochs=2"]));
    let whole = fs::read(dir.path().join("out/prior-l1/prior.bin")).unwrap();
    ok(run(dir.path(), &["train", "--variant", "l1", "--set", "mapper.epochs=1"]));
    ok(run(dir.path(), &["train", "--variant", "l1", "--set", "mapper.epochs=2", "--resume"]));
    assert_eq!(fs::read(dir.path().join("out/prior-l1/prior.bin")).unwrap(), whole);
    let trace = fs::read_to_string(dir.path().join("out/prior-l1/trace.csv")).unwrap();
    assert_eq!(trace.lines().count(), 3);

    let o = run(dir.path(), &["train", "--variant", "l1", "--set", "mapper.epochs=3", "--set", "train.seed=9", "--resume"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn reconstruct_eval_and_reproducibility() {
    let dir = tempfile::tempdir().unwrap();
    ok(run(dir.path(), &["gen-data"]));
    ok(run(dir.path(), &["train"]));
    let data = Dataset::open(&dir.path().join("out/data")).unwrap();
    let test_slices = data.manifest().split_slices(adadiff_core::phantom::Split::Test).len();

    ok(run(dir.path(), &["reconstruct", "--variant", "no-adapt"]));
    let recon = dir.path().join("out/recon-no_adapt");
    let pngs = files(&recon).iter().filter(|p| p.extension().is_some_and(|e| e == "png")).count();
    assert_eq!(pngs, 3 * test_slices);
    for f in files(&recon).iter().filter(|p| p.file_name().unwrap() == "result.json") {
        let v: serde_json::Value = serde_json::from_str(&fs::read_to_string(f).unwrap()).unwrap();
        assert_eq!(v["dc_loss_trace"].as_array().unwrap().len(), 0);
    }

    ok(run(dir.path(), &["reconstruct"]));
    let full = dir.path().join("out/recon-full");
    let copy = dir.path().join("copy");
    fs::rename(&full, &copy).unwrap();
    let mut c = bin();
    c.args(["reconstruct", "--workers", "2", "--config"])
        .arg(dir.path().join("small.toml"))
        .arg("--out")
        .arg(dir.path().join("out"));
    ok(c.output().unwrap());
    assert_same_tree(&copy, &full);

    let o = ok(run(
        dir.path(),
        &["eval", "--recon", full.to_str().unwrap(), "--recon", recon.to_str().unwrap()],
    ));
    let stdout = String::from_utf8_lossy(&o.stdout);
    assert_eq!(stdout.lines().count(), 1 + 2 * 2);
    assert!(stdout.contains("recon-full,T1"));
    let report = fs::read_to_string(dir.path().join("out/eval/scores.csv")).unwrap();
    assert_eq!(report.lines().count(), 1 + 2 * test_slices);
}

#[test]
fn adaptation_divergence_exits_with_code_4() {
    let dir = tempfile::tempdir().unwrap();
    ok(run(dir.path(), &["gen-data"]));
    ok(run(dir.path(), &["train", "--set", "mapper.epochs=0"]));
    let o = run(
        dir.path(),
        &["reconstruct", "--set", "recon.learning_rate=1e300", "--set", "recon.iterations=5"],
    );
    assert_eq!(o.status.code(), Some(4), "stderr: {}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn ablation_report_covers_every_variant_and_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    ok(run(dir.path(), &["gen-data"]));
    let o = ok(run(dir.path(), &["ablate"]));
    let stdout = String::from_utf8_lossy(&o.stdout).to_string();
    assert_eq!(stdout.lines().count(), 1 + 5 * 2);
    for m in ["full", "no_adapt", "no_train", "l1", "no_z"] {
        assert!(stdout.lines().any(|l| l.starts_with(&format!("{m},"))), "{m} missing");
    }
    let first = fs::read(dir.path().join("out/ablate/report.json")).unwrap();
    let again = ok(run(dir.path(), &["ablate", "--priors", dir.path().join("out/ablate").to_str().unwrap()]));
    assert_eq!(String::from_utf8_lossy(&again.stdout), stdout);
    assert_eq!(fs::read(dir.path().join("out/ablate/report.json")).unwrap(), first);
}
