use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn srdl(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_srdl"))
        .args(args)
        .env_remove("SRDL_PROFILE")
        .env_remove("SRDL_SEED")
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exit code")
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

/// Generates a small dataset under `dir/data` and returns a fast run config.
fn setup(dir: &Path) -> std::path::PathBuf {
    let spec = dir.join("spec.toml");
    fs::write(
        &spec,
        "categories = 3\nimages = 16\nimage_size = 32\nseed = 4\ncooccurrence = [[1.0, 0.7, 0.1], [0.7, 1.0, 0.1], [0.1, 0.1, 1.0]]\n",
    )
    .unwrap();
    let data = dir.join("data");
    let out = srdl(&["synth-data", "--config", p(&spec), "--out", p(&data)]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let cfg = dir.join("run.toml");
    fs::write(
        &cfg,
        "[data]\nmanifest = \"data/manifest.tsv\"\nvocabulary = \"data/vocabulary.txt\"\nword_vectors = \"data/word_vectors.txt\"\n\
         [backbone]\nchannels = [4, 6, 6, 8]\n\
         [augment]\nresize_base = 32\ncrop_scales = [32, 28]\nfinal_size = 32\n\
         [optim]\nepochs = 2\nbatch_size = 4\n",
    )
    .unwrap();
    cfg
}

#[test]
fn synth_train_evaluate_end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = setup(dir.path());
    let run = dir.path().join("run");
    let out = srdl(&["train", "--config", p(&cfg), "--out", p(&run)]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let ckpt = String::from_utf8(out.stdout).unwrap().trim().to_owned();
    assert!(ckpt.ends_with("epoch_002.ckpt"), "{ckpt}");

    let eval = dir.path().join("eval");
    let out = srdl(&["evaluate", "--config", p(&cfg), "--out", p(&eval), "--checkpoint", &ckpt]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let text = String::from_utf8(out.stdout).unwrap();
    for key in ["mAP=", "OP=", "OR=", "OF1=", "CP=", "CR=", "CF1="] {
        assert!(text.lines().any(|l| l.starts_with(key)), "missing {key} in {text}");
    }
    assert!(eval.join("predictions.tsv").exists());

    let img = dir.path().join("data/images/img_00000.png");
    let out = srdl(&["infer", "--config", p(&cfg), "--out", p(&dir.path().join("inf")), "--checkpoint", &ckpt, p(&img)]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let out = srdl(&["visualize", "--config", p(&cfg), "--out", p(&dir.path().join("vis")), "--checkpoint", &ckpt, p(&img)]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    assert_eq!(String::from_utf8(out.stdout).unwrap().lines().count(), 3);

    // --seed overrides both configured seeds
    let out = srdl(&["train", "--config", p(&cfg), "--out", p(&dir.path().join("run2")), "--seed", "9"]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
}

#[test]
fn config_errors_exit_with_2() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = setup(dir.path());
    let out_dir = dir.path().join("out");

    let missing = srdl(&["train", "--config", p(&dir.path().join("nope.toml")), "--out", p(&out_dir)]);
    assert_eq!(code(&missing), 2);

    let bad = dir.path().join("bad.toml");
    fs::write(&bad, fs::read_to_string(&cfg).unwrap() + "[oe]\nalpha = 1.5\n").unwrap();
    let out = srdl(&["train", "--config", p(&bad), "--out", p(&out_dir)]);
    assert_eq!(code(&out), 2);
    assert!(stderr(&out).contains("alpha"), "{}", stderr(&out));

    fs::write(&bad, fs::read_to_string(&cfg).unwrap() + "[car]\nablations = [\"no-xyz\"]\n").unwrap();
    assert_eq!(code(&srdl(&["train", "--config", p(&bad), "--out", p(&out_dir)])), 2);

    let spec = dir.path().join("badspec.toml");
    fs::write(&spec, "categories = 3\ncolour_count = 2\n").unwrap();
    let out = srdl(&["synth-data", "--config", p(&spec), "--out", p(&out_dir)]);
    assert_eq!(code(&out), 2);
    assert!(stderr(&out).contains("colour_count"), "{}", stderr(&out));

    let out = Command::new(env!("CARGO_BIN_EXE_srdl")).args(["train"]).output().unwrap();
    assert_eq!(code(&out), 2);

    let out = srdl(&["train", "--config", p(&cfg), "--out", p(&out_dir)]);
    assert_eq!(code(&out), 0);
    let out = srdl(&[
        "evaluate", "--config", p(&cfg), "--out", p(&out_dir), "--checkpoint",
        p(&out_dir.join("checkpoints/epoch_002.ckpt")), "--split", "sideways",
    ]);
    assert_eq!(code(&out), 2);
}

#[test]
fn runtime_aborts_exit_with_3() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = setup(dir.path());
    let out_dir = dir.path().join("out");

    let inf = dir.path().join("inf.toml");
    fs::write(&inf, fs::read_to_string(&cfg).unwrap().replace("[augment]\n", "[augment]\nstd = [1e-320, 1e-320, 1e-320]\n")).unwrap();
    let out = srdl(&["train", "--config", p(&inf), "--out", p(&out_dir)]);
    assert_eq!(code(&out), 3, "{}", stderr(&out));
    assert!(out_dir.join("nonfinite_batch.json").exists());

    let junk = dir.path().join("junk.ckpt");
    fs::write(&junk, b"garbage").unwrap();
    let out = srdl(&["evaluate", "--config", p(&cfg), "--out", p(&out_dir), "--checkpoint", p(&junk)]);
    assert_eq!(code(&out), 3);
}

#[test]
fn sweep_writes_both_curves() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = setup(dir.path());
    let fast = dir.path().join("fast.toml");
    fs::write(&fast, fs::read_to_string(&cfg).unwrap().replace("epochs = 2", "epochs = 1")).unwrap();
    let out_dir = dir.path().join("sweep");
    let out = srdl(&["sweep", "--config", p(&fast), "--out", p(&out_dir)]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    assert_eq!(fs::read_to_string(out_dir.join("topk_curve.tsv")).unwrap().lines().count(), 9);
    assert_eq!(fs::read_to_string(out_dir.join("alpha_curve.tsv")).unwrap().lines().count(), 10);
}
