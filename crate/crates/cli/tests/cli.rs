use std::path::Path;
use std::process::{Command, Output};

const TINY: &str = r#"
[train]
initial_lr = 1e-3
batch_size = 8
epochs = 1
patch_size = 32
patches_per_image = 2
test_patches = 2
seed = 4

[train.model]
channels = [4, 4, 8, 8]
hfen_channels = 4
head_hidden = 8

[pretrain]
steps = 3
batch_images = 6
crop = 32

[pretrain.encoder]
stem_channels = 4
channels = [4, 4, 8, 8]
proj_dim = 8

[split]
n_repeats = 2

[toy]
n_refs = 4
kinds = ["gaussian_blur", "white_noise"]
levels = 2
size = 64
name = "tiny"
"#;

fn mtiqa(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mtiqa"))
        .current_dir(dir)
        .env("RUST_LOG", "warn")
        .args(args)
        .output()
        .unwrap()
}

fn error_json(o: &Output) -> serde_json::Value {
    let err = String::from_utf8_lossy(&o.stderr);
    let line = err.lines().last().unwrap_or_default();
    serde_json::from_str(line).unwrap_or_else(|_| panic!("stderr is not JSON: {err}"))
}

fn setup() -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("tiny.toml"), TINY).unwrap();
    let o = mtiqa(
        dir.path(),
        &["--config", "tiny.toml", "--out-dir", "data", "toy-corpus"],
    );
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    dir
}

#[test]
fn missing_config_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let o = mtiqa(dir.path(), &["--config", "nope.toml", "eval", "--manifest", "m.csv"]);
    assert_eq!(o.status.code(), Some(2));
    assert_eq!(error_json(&o)["error"], "usage");
    let o = mtiqa(dir.path(), &["eval", "--manifest", "m.csv"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn unknown_config_key_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("bad.toml"), "[train]\nepoch = 3\n").unwrap();
    let o = mtiqa(dir.path(), &["--config", "bad.toml", "eval", "--manifest", "m.csv"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn eval_is_reproducible_and_refuses_to_overwrite() {
    let dir = setup();
    let p = dir.path();
    let args = [
        "--config",
        "tiny.toml",
        "--no-dan",
        "--out-dir",
        "run",
        "eval",
        "--manifest",
        "data/tiny.csv",
    ];
    let o = mtiqa(p, &args);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let first = std::fs::read(p.join("run/report.json")).unwrap();
    let csv = std::fs::read_to_string(p.join("run/report.csv")).unwrap();
    assert!(csv.starts_with("split,srcc,plcc,final_loss\n"));
    assert!(p.join("run/timing.json").is_file());

    let o = mtiqa(p, &args);
    assert_eq!(o.status.code(), Some(1));
    let e = error_json(&o);
    assert_eq!(e["error"], "exists");
    assert!(e["message"].as_str().unwrap().contains("exists; use --force"));

    let mut forced = args.to_vec();
    forced.insert(0, "--force");
    let o = mtiqa(p, &forced);
    assert!(o.status.success());
    assert_eq!(std::fs::read(p.join("run/report.json")).unwrap(), first);

    let o = mtiqa(p, &["--out-dir", "plots", "report", "--report", "run/report.json"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(p.join("plots/scatter.svg").is_file() && p.join("plots/loss.svg").is_file());
}

#[test]
fn pretrain_then_train_with_encoder() {
    let dir = setup();
    let p = dir.path();
    let o = mtiqa(
        p,
        &[
            "--config",
            "tiny.toml",
            "--out-dir",
            "enc",
            "pretrain",
            "--manifest",
            "data/tiny.csv",
        ],
    );
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(p.join("enc/encoder.ckpt").is_file());
    let loss = std::fs::read_to_string(p.join("enc/pretrain_loss.csv")).unwrap();
    assert_eq!(loss.lines().count(), 4);

    let o = mtiqa(
        p,
        &[
            "--config",
            "tiny.toml",
            "--out-dir",
            "model",
            "train",
            "--manifest",
            "data/tiny.csv",
        ],
    );
    assert_eq!(o.status.code(), Some(1));
    assert_eq!(error_json(&o)["error"], "missing_encoder");

    let o = mtiqa(
        p,
        &[
            "--config",
            "tiny.toml",
            "--out-dir",
            "model",
            "train",
            "--manifest",
            "data/tiny.csv",
            "--encoder",
            "enc/encoder.ckpt",
        ],
    );
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(p.join("model/model.ckpt").is_file());
}

#[test]
fn cross_eval_refuses_the_training_set_as_test_set() {
    let dir = setup();
    let p = dir.path();
    let o = mtiqa(
        p,
        &[
            "--config",
            "tiny.toml",
            "--no-dan",
            "cross-eval",
            "--train",
            "data/tiny.csv",
            "--test",
            "data/tiny.csv",
        ],
    );
    assert_eq!(o.status.code(), Some(2));
    assert!(!p.join("out/cross_eval.json").exists());
}
