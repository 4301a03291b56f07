use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn hierdet(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_hierdet"))
        .args(args)
        .env("RUST_LOG", "error")
        .output()
        .expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exit code")
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn gen(dir: &Path, count: usize, seed: u64) {
    let out = hierdet(&["gen", "--out", dir.to_str().unwrap(), "--count", &count.to_string(), "--seed", &seed.to_string()]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
}

fn write_config(dir: &Path, json: &str) -> String {
    let path = dir.join("config.json");
    fs::write(&path, json).unwrap();
    path.to_str().unwrap().to_owned()
}

#[test]
fn gen_writes_count_images() {
    let dir = tempfile::tempdir().unwrap();
    gen(dir.path(), 10, 1);
    let ppm = fs::read_dir(dir.path().join("imgs")).unwrap().count();
    assert_eq!(ppm, 10);
    let labels = fs::read_to_string(dir.path().join("labels.jsonl")).unwrap();
    assert_eq!(labels.lines().count(), 10);
}

#[test]
fn gen_is_reproducible() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    gen(a.path(), 4, 9);
    gen(b.path(), 4, 9);
    for name in ["labels.jsonl", "manifest.json", "taxonomy.json", "imgs/000003.ppm"] {
        assert_eq!(fs::read(a.path().join(name)).unwrap(), fs::read(b.path().join(name)).unwrap());
    }
}

#[test]
fn gen_invalid_radius_exits_2_naming_field() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), r#"{"synth": {"radius_range": [0.3, 0.6]}}"#);
    let out = hierdet(&["gen", "--config", &cfg, "--out", dir.path().join("ds").to_str().unwrap()]);
    assert_eq!(code(&out), 2);
    assert!(stderr(&out).contains("radius_range"), "{}", stderr(&out));
}

#[test]
fn usage_errors_exit_2() {
    assert_eq!(code(&hierdet(&[])), 2);
    assert_eq!(code(&hierdet(&["train", "--out", "x"])), 2);
    assert_eq!(code(&hierdet(&["frobnicate"])), 2);
}

#[test]
fn anchors_single_shape_and_missing_dataset() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(
        dir.path(),
        r#"{"synth": {"cells_per_image": [1, 1], "radius_range": [0.07, 0.07]}}"#,
    );
    let ds = dir.path().join("ds");
    let out = hierdet(&["gen", "--config", &cfg, "--out", ds.to_str().unwrap(), "--count", "12"]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let out = hierdet(&["anchors", "--data", ds.to_str().unwrap(), "--k", "1"]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let set: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    let a = &set["anchors"][0];
    assert!((a[0].as_f64().unwrap() - 0.14).abs() < 1e-9, "{set}");
    assert!((a[1].as_f64().unwrap() - 0.14).abs() < 1e-9, "{set}");
    assert!((set["mean_best_iou"].as_f64().unwrap() - 1.0).abs() < 1e-9);

    let out = hierdet(&["anchors", "--data", ds.to_str().unwrap(), "--k", "50"]);
    assert_eq!(code(&out), 2);
    let out = hierdet(&["anchors", "--data", dir.path().join("nope").to_str().unwrap()]);
    assert_eq!(code(&out), 2);
}

#[test]
fn beta_with_normal_loss_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    gen(dir.path(), 6, 0);
    let d = dir.path().to_str().unwrap();
    let out = hierdet(&["train", "--data", d, "--loss", "normal", "--beta", "1", "--out", "run"]);
    assert_eq!(code(&out), 2);
    assert!(stderr(&out).contains("--beta"), "{}", stderr(&out));
    let out = hierdet(&["train", "--data", d, "--loss", "weighted", "--alpha", "0.5", "--out", "run"]);
    assert_eq!(code(&out), 2);
}

#[test]
fn train_eval_and_corrupt_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let ds = dir.path().join("ds");
    gen(&ds, 12, 0);
    let run = dir.path().join("run");
    let out = hierdet(&[
        "train", "--data", ds.to_str().unwrap(), "--loss", "weighted", "--alpha", "2.5", "--epochs", "1", "--out",
        run.to_str().unwrap(),
    ]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    assert!(String::from_utf8_lossy(&out.stdout).contains("weighted_a2.50"));
    let metrics = fs::read_to_string(run.join("metrics.csv")).unwrap();
    assert_eq!(metrics.lines().next(), Some("epoch,box,obj,cls,total,fine_map,coarse_map"));
    assert_eq!(metrics.lines().count(), 2);

    let ckpt = run.join("checkpoint.hdet");
    let out = hierdet(&["eval", "--ckpt", ckpt.to_str().unwrap(), "--data", ds.to_str().unwrap()]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("fine mAP@0.5") && stdout.contains("coarse mAP@0.5"), "{stdout}");
    let report: serde_json::Value = serde_json::from_slice(&fs::read(run.join("eval.json")).unwrap()).unwrap();
    assert_eq!(report["fine"]["granularity"], "fine");

    let bytes = fs::read(&ckpt).unwrap();
    let cut = dir.path().join("cut.hdet");
    fs::write(&cut, &bytes[..bytes.len() - 7]).unwrap();
    let out = hierdet(&["eval", "--ckpt", cut.to_str().unwrap(), "--data", ds.to_str().unwrap()]);
    assert_eq!(code(&out), 2, "{}", stderr(&out));
    let mut bad = bytes.clone();
    bad[0] = b'X';
    fs::write(&cut, &bad).unwrap();
    let out = hierdet(&["eval", "--ckpt", cut.to_str().unwrap(), "--data", ds.to_str().unwrap()]);
    assert_eq!(code(&out), 2, "{}", stderr(&out));
}

#[test]
fn diverging_training_exits_3() {
    let dir = tempfile::tempdir().unwrap();
    gen(dir.path(), 6, 0);
    let out = hierdet(&[
        "train", "--data", dir.path().to_str().unwrap(), "--epochs", "3", "--lr", "1e100", "--out",
        dir.path().join("run").to_str().unwrap(),
    ]);
    assert_eq!(code(&out), 3, "{}", stderr(&out));
    assert!(stderr(&out).contains("epoch"), "{}", stderr(&out));
}

#[test]
fn ablate_tiny_config_gives_five_rows() {
    let dir = tempfile::tempdir().unwrap();
    let ds = dir.path().join("ds");
    gen(&ds, 6, 0);
    let out_dir = dir.path().join("abl");
    let out = hierdet(&[
        "ablate", "--data", ds.to_str().unwrap(), "--epochs", "1", "--seeds", "0", "--out", out_dir.to_str().unwrap(),
    ]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let csv = fs::read_to_string(out_dir.join("report.csv")).unwrap();
    let labels: Vec<&str> = csv.lines().skip(1).map(|l| l.split(',').next().unwrap()).collect();
    assert_eq!(labels, ["normal", "weighted_a2.50", "weighted_a3.00", "weighted_a3.50", "proposed_a2.00_b1.00"]);
    assert!(csv.lines().skip(1).all(|l| l.split(',').nth(1) == Some("1")), "{csv}");
    assert!(out_dir.join("report.md").exists());
    assert!(out_dir.join("normal_seed0/checkpoint.hdet").exists());
}

#[test]
fn gradcheck_passes_and_catches_injected_fault() {
    let out = hierdet(&["gradcheck"]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let out = hierdet(&["gradcheck", "--inject-fault", "sigmoid"]);
    assert_eq!(code(&out), 1);
    assert!(stderr(&out).contains("sigmoid"), "{}", stderr(&out));
}
