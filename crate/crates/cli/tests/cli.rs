use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use lhc_core::checkpoint::load_model;
use lhc_core::objective::global_density;

const TINY: &[&str] = &[
    "--set",
    "layers=F/8/3/1/1/2x2,R/8/3/2/1/4x2",
    "--set",
    "n_train=40",
    "--set",
    "n_test=20",
    "--set",
    "image_size=8",
    "--set",
    "epochs=3",
    "--set",
    "n_warm=1",
];

fn lhc(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_lhc"))
        .args(args)
        .output()
        .expect("spawn lhc")
}

fn train_tiny(out: &Path, extra: &[&str]) -> Output {
    let mut args = vec!["train", "--out", out.to_str().unwrap(), "--set", "seed=3"];
    args.extend_from_slice(TINY);
    args.extend_from_slice(extra);
    lhc(&args)
}

fn stdout_json(o: &Output) -> serde_json::Value {
    serde_json::from_slice(&o.stdout).expect("json on stdout")
}

/// Column `name` of a metrics CSV.
fn column(csv: &str, name: &str) -> Vec<f64> {
    let mut lines = csv.lines();
    let header: Vec<&str> = lines.next().unwrap().split(',').collect();
    let i = header.iter().position(|h| *h == name).unwrap();
    lines.map(|l| l.split(',').nth(i).unwrap().parse().unwrap()).collect()
}

#[test]
fn train_writes_artifacts_and_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    assert!(train_tiny(&a, &[]).status.success());
    assert!(train_tiny(&b, &[]).status.success());
    let ma = fs::read_to_string(a.join("metrics.csv")).unwrap();
    assert!(ma.starts_with("epoch,task_loss,mask_loss,alpha,density,accuracy\n"));
    assert_eq!(ma, fs::read_to_string(b.join("metrics.csv")).unwrap());
    assert_eq!(fs::read(a.join("model.lhc")).unwrap(), fs::read(b.join("model.lhc")).unwrap());
}

#[test]
fn logged_density_matches_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let out = train_tiny(dir.path(), &[]);
    assert!(out.status.success());
    let logged = *column(&fs::read_to_string(dir.path().join("metrics.csv")).unwrap(), "density")
        .last()
        .unwrap();
    let model = load_model(&dir.path().join("model.lhc")).unwrap();
    let masks = model.topology_masks().unwrap();
    let refs: Vec<_> = masks.iter().collect();
    assert_eq!(logged, global_density(&refs));
    assert_eq!(stdout_json(&out)["density"].as_f64().unwrap(), logged);
}

#[test]
fn no_target_keeps_mask_loss_and_alpha_zero() {
    let dir = tempfile::tempdir().unwrap();
    assert!(train_tiny(dir.path(), &["--set", "d_t=invalid"]).status.success());
    let csv = fs::read_to_string(dir.path().join("metrics.csv")).unwrap();
    assert!(column(&csv, "mask_loss").iter().all(|&v| v == 0.0));
    assert!(column(&csv, "alpha").iter().all(|&v| v == 0.0));
}

#[test]
fn eval_reproduces_training_accuracy() {
    let dir = tempfile::tempdir().unwrap();
    let out = train_tiny(dir.path(), &[]);
    let trained = stdout_json(&out)["accuracy"].as_f64().unwrap();
    let ckpt = dir.path().join("model.lhc");
    let mut args = vec!["eval", "--checkpoint", ckpt.to_str().unwrap(), "--set", "seed=3"];
    args.extend_from_slice(TINY);
    let ev = lhc(&args);
    assert!(ev.status.success(), "{}", String::from_utf8_lossy(&ev.stderr));
    let j = stdout_json(&ev);
    assert_eq!(j["accuracy"].as_f64().unwrap(), trained);
    assert_eq!(j["samples"].as_u64().unwrap(), 20);
}

#[test]
fn reports_from_a_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    assert!(train_tiny(dir.path(), &["--snapshot-masks"]).status.success());
    let ckpt = dir.path().join("model.lhc");
    let ckpt = ckpt.to_str().unwrap();

    let flops = lhc(&["flops", "--checkpoint", ckpt, "--height", "8", "--width", "8"]);
    let j = stdout_json(&flops);
    assert_eq!(j["layers"].as_array().unwrap().len(), 2);
    assert_eq!(j["unit"], "MACs");

    let sim = lhc(&["simulate", "--checkpoint", ckpt, "--height", "8", "--width", "8"]);
    let s = stdout_json(&sim);
    assert!(s["clock_ratio"].as_f64().unwrap() <= 1.0);
    assert_eq!(s["layers"].as_array().unwrap().len(), 2);

    let shapes = lhc(&["analyze", "shapes", "--checkpoint", ckpt]);
    assert_eq!(stdout_json(&shapes).as_array().unwrap().len(), 2);

    let snaps = dir.path().join("snapshots");
    let corr = lhc(&["analyze", "correlation", "--snapshots", snaps.to_str().unwrap()]);
    let series = stdout_json(&corr);
    assert_eq!(series[0]["epochs"].as_array().unwrap().len(), 2);

    let spec = lhc(&["analyze", "spectrum", "--checkpoint", ckpt, "--height", "4", "--width", "4"]);
    // min(4*4*8 outputs, 4*4*3 inputs).
    assert_eq!(stdout_json(&spec)["singular_values"].as_array().unwrap().len(), 48);
}

#[test]
fn catalog_dump_lists_fifteen_rigid_shapes() {
    let o = lhc(&["catalog-dump"]);
    let text = String::from_utf8(o.stdout).unwrap();
    assert_eq!(text.lines().count(), 15);
    assert!(text.lines().nth(1).unwrap().starts_with("1 <2>1 000010000 1"));
    let free = lhc(&["catalog-dump", "--free"]);
    assert_eq!(String::from_utf8(free.stdout).unwrap().lines().count(), 512);
}

#[test]
fn help_documents_every_default() {
    let o = lhc(&["train", "--help"]);
    assert!(o.status.success());
    let text = String::from_utf8(o.stdout).unwrap();
    for key in ["seed", "d_t", "alpha_t", "n_warm", "effect_lr_scale", "augment_translate"] {
        assert!(text.contains(key), "missing {key}");
    }
    assert!(text.contains("0.25"));
}

#[test]
fn exit_codes() {
    assert_eq!(lhc(&["no-such-command"]).status.code(), Some(1));
    assert_eq!(lhc(&["train", "--set", "epochs=1"]).status.code(), Some(1));

    let dir = tempfile::tempdir().unwrap();
    let junk = dir.path().join("junk.lhc");
    fs::write(&junk, b"not a model").unwrap();
    let o = lhc(&["flops", "--checkpoint", junk.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    let o = lhc(&["analyze", "correlation", "--snapshots", dir.path().to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));

    let truncated = dir.path().join("cifar.bin");
    fs::write(&truncated, vec![1u8; 3073 + 100]).unwrap();
    let set = format!("dataset={}", truncated.display());
    let o = lhc(&["train", "--set", "seed=1", "--set", &set, "--out", dir.path().to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("byte 3073"));

    let mut args = vec!["train", "--set", "seed=1", "--set", "lr=1e6", "--set", "epochs=3"];
    args.extend_from_slice(&["--set", "n_train=40", "--set", "n_test=20", "--set", "image_size=8"]);
    let out = dir.path().join("div");
    args.extend_from_slice(&["--out", out.to_str().unwrap()]);
    let o = lhc(&args);
    assert_eq!(o.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&o.stderr).contains("epoch"));
}
