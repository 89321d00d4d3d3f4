use std::path::Path;
use std::process::{Command, Output};

use deep_ritz::artifacts;
use deep_ritz::experiment::{read_sweep_summary, SweepAxis};
use deep_ritz::trainer::RunManifest;

fn deep_ritz(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_deep-ritz"))
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

const SHORT: &[&str] = &[
    "--layers",
    "2",
    "--width",
    "16",
    "--epochs",
    "60",
    "--fourier-i",
    "2",
    "--grid-resolution",
    "129",
    "--mc-samples",
    "2000",
];

fn train(out: &Path, extra: &[&str]) -> Output {
    let mut args = vec!["train", "--out", out.to_str().unwrap()];
    args.extend_from_slice(SHORT);
    args.extend_from_slice(extra);
    deep_ritz(&args)
}

#[test]
fn zero_width_is_rejected_by_name() {
    let o = deep_ritz(&["train", "--width", "0", "--dry-run"]);
    // Dry runs only print; validation happens on a real run.
    assert!(o.status.success());
    let dir = tempfile::tempdir().unwrap();
    let o = deep_ritz(&["train", "--width", "0", "--out", dir.path().join("r").to_str().unwrap()]);
    assert!(!o.status.success());
    assert!(stderr(&o).contains("width"), "{}", stderr(&o));
    assert!(!dir.path().join("r").exists());
}

#[test]
fn identical_runs_write_identical_histories() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    assert!(train(&a, &["--seed", "4"]).status.success());
    assert!(train(&b, &["--seed", "4"]).status.success());
    let read = |d: &Path| std::fs::read(d.join("loss_history.csv")).unwrap();
    assert_eq!(read(&a), read(&b));
    let c = dir.path().join("c");
    assert!(train(&c, &["--seed", "5"]).status.success());
    assert_ne!(read(&a), read(&c));
}

#[test]
fn artifacts_are_complete_and_readable() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run");
    let o = train(&out, &[]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stdout(&o).contains("transitions"));
    let m: RunManifest = artifacts::read_json(&out.join("manifest.json")).unwrap();
    assert_eq!(m.train.epochs, 60);
    assert_eq!(m.network.width, 16);
    let hist = artifacts::read_loss_history(&out.join("loss_history.csv")).unwrap();
    assert!(!hist.is_empty());
    let grid = artifacts::read_field_grid(&out.join("fields.csv")).unwrap();
    assert_eq!(grid.dim, 1);
    let ckpt = artifacts::read_checkpoint(&out.join("checkpoint_final.bin")).unwrap();
    assert_eq!(ckpt.epoch, 60);
    for f in ["transitions.json", "energy.json", "spec.json"] {
        assert!(out.join(f).is_file(), "{f}");
    }
}

#[test]
fn existing_output_needs_force() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run");
    assert!(train(&out, &[]).status.success());
    let o = train(&out, &[]);
    assert!(!o.status.success());
    assert!(stderr(&o).contains("already exists"), "{}", stderr(&o));
    assert!(train(&out, &["--force"]).status.success());
}

#[test]
fn config_file_and_flags_layer() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.toml");
    std::fs::write(&cfg, "preset = \"fig5b\"\nepochs = 7\nwidth = 12\n").unwrap();
    let o = deep_ritz(&["train", "--config", cfg.to_str().unwrap(), "--width", "9", "--dry-run"]);
    let text = stdout(&o);
    assert!(text.contains("problem = \"DW1D_Lower\""), "{text}");
    assert!(text.contains("epochs = 7"));
    assert!(text.contains("width = 9"));
    assert!(text.contains("fourier_i = 2"));
}

#[test]
fn unknown_preset_fails() {
    let o = deep_ritz(&["train", "--preset", "fig99", "--dry-run"]);
    assert!(!o.status.success());
    assert!(stderr(&o).contains("fig99"));
}

#[test]
fn kernel_self_tests() {
    let o = deep_ritz(&["ntk", "--self-test", "constant", "--sizes", "16"]);
    assert!(o.status.success());
    let first = stdout(&o).lines().nth(1).unwrap().to_string();
    let cols: Vec<&str> = first.split_whitespace().collect();
    assert_eq!(cols[..3], ["16", "1", "1.00000000"]);

    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("bm");
    let o = deep_ritz(&[
        "ntk",
        "--self-test",
        "brownian",
        "--sizes",
        "512",
        "--out",
        out.to_str().unwrap(),
    ]);
    assert!(o.status.success());
    let (_, rows) = artifacts::read_table(&out.join("self_test.csv")).unwrap();
    let err: f64 = rows[0][4].parse().unwrap();
    assert!(err < 0.02, "{err}");
}

#[test]
fn ntk_writes_spectrum_and_fit() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("ntk");
    let o = deep_ritz(&[
        "ntk",
        "--layers",
        "1",
        "--width",
        "64",
        "--fourier-i",
        "0",
        "--points",
        "64",
        "--seeds",
        "2",
        "--k-hi",
        "32",
        "--out",
        out.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stdout(&o).contains("slope"));
    let spec = artifacts::read_spectrum(&out.join("spectrum.csv")).unwrap();
    assert_eq!(spec.len(), 64);
    assert!(spec.windows(2).all(|w| w[0] >= w[1]));
    assert!(out.join("fit.json").is_file());
}

#[test]
fn sweep_rows_and_validation() {
    let o = deep_ritz(&["sweep", "--axis", "seed", "--values"]);
    assert!(!o.status.success());
    assert!(stderr(&o).contains("empty"), "{}", stderr(&o));

    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("sweep");
    let mut args = vec![
        "sweep",
        "--axis",
        "seed",
        "--values",
        "1,2,3",
        "--out",
        out.to_str().unwrap(),
    ];
    args.extend_from_slice(SHORT);
    let o = deep_ritz(&args);
    assert!(o.status.success(), "{}", stderr(&o));
    let rows = read_sweep_summary(&out.join("summary.csv")).unwrap();
    assert_eq!(rows.len(), 3);
    assert!(rows
        .iter()
        .all(|r| r.axis == SweepAxis::Seed && r.error.is_none() && r.final_energy.is_some()));
    for s in ["1", "2", "3"] {
        let m: RunManifest = artifacts::read_json(&out.join(format!("seed_{s}/manifest.json"))).unwrap();
        assert_eq!(m.train.seed.to_string(), s);
        assert_eq!(m.network.width, 16);
    }
}

#[test]
fn invalid_sweep_value_is_reported_before_training() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("sweep");
    let o = deep_ritz(&[
        "sweep",
        "--axis",
        "depth",
        "--values",
        "2,0",
        "--out",
        out.to_str().unwrap(),
    ]);
    assert!(!o.status.success());
    assert!(stderr(&o).contains("depth=0"), "{}", stderr(&o));
    assert!(!out.exists());
}
