use std::path::Path;
use std::process::{Command, Output};

fn airnet(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_airnet"))
        .args(args)
        .env("AIRNET_THREADS", "1")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> Output {
    let out = airnet(args);
    assert!(
        out.status.success(),
        "{args:?} failed:\n{}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

const MODEL: &[&str] = &[
    "--d", "16", "--m", "8", "--cardinalities", "16,8", "--l2", "1", "--k-enc", "6", "--k-dec", "4",
    "--d-dec", "16", "--head-width", "32", "--head-blocks", "2",
];

fn small_dataset(dir: &Path, count: &str, seed: &str) {
    ok(&["gen-data", "--out", s(dir), "--count", count, "--seed", seed, "--points", "64", "--supervision", "400"]);
}

#[test]
fn full_pipeline_runs() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    small_dataset(&data, "3", "1");
    assert!(data.join("shape_00002").join("input.xyz").exists());

    let run = tmp.path().join("run");
    let mut args = vec!["train", "--data", s(&data), "--out", s(&run), "--epochs", "2", "--batch-size", "2", "--points-per-shape", "64"];
    args.extend_from_slice(MODEL);
    ok(&args);
    let log = std::fs::read_to_string(run.join("train_log.tsv")).unwrap();
    assert_eq!(log.lines().next(), Some("epoch\ttrain_loss\tval_loss\tlr"));
    assert_eq!(log.lines().count(), 3);
    let config = std::fs::read_to_string(run.join("config.txt")).unwrap();
    assert!(config.contains("epochs=2\n") && config.contains("d=16\n"));

    let meshes = tmp.path().join("meshes");
    let ck = run.join("best.ckpt");
    ok(&["reconstruct", "--checkpoint", s(&ck), "--input", s(&data), "--out", s(&meshes), "--res0", "8", "--upsample", "1"]);
    for i in 0..3 {
        assert!(meshes.join(format!("shape_{i:05}.obj")).exists());
    }

    let eval = tmp.path().join("eval");
    let out = ok(&["eval", "--data", s(&data), "--meshes", s(&meshes), "--out", s(&eval), "--iou-samples", "2000", "--surface-samples", "2000"]);
    let table = String::from_utf8(out.stdout).unwrap();
    assert!(table.contains("IoU↑") && table.contains("mean"));
    let kv = std::fs::read_to_string(eval.join("eval_kv.txt")).unwrap();
    assert!(kv.contains("mean.iou="));
}

#[test]
fn single_cloud_reconstruction_and_resume() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    small_dataset(&data, "2", "4");
    let run = tmp.path().join("run");
    let mut args = vec!["train", "--data", s(&data), "--out", s(&run), "--epochs", "0"];
    args.extend_from_slice(MODEL);
    ok(&args);
    let ck = run.join("best.ckpt");
    let resumed = tmp.path().join("resumed");
    ok(&["train", "--data", s(&data), "--out", s(&resumed), "--epochs", "0", "--init-checkpoint", s(&ck)]);
    assert_eq!(std::fs::read(&ck).unwrap(), std::fs::read(resumed.join("best.ckpt")).unwrap());

    let cloud = data.join("shape_00000").join("input.xyz");
    let out = tmp.path().join("one");
    ok(&["reconstruct", "--checkpoint", s(&ck), "--input", s(&cloud), "--out", s(&out), "--res0", "8", "--upsample", "0"]);
    assert!(out.join("input.obj").exists());
}

#[test]
fn usage_errors_exit_with_one() {
    let tmp = tempfile::tempdir().unwrap();
    assert_eq!(airnet(&["gen-data"]).status.code(), Some(1));
    assert_eq!(airnet(&["gen-data", "--out", s(tmp.path()), "--colour", "blue"]).status.code(), Some(1));
    assert_eq!(airnet(&["train", "--data", "/nonexistent", "--out", s(&tmp.path().join("t"))]).status.code(), Some(1));

    let data = tmp.path().join("data");
    small_dataset(&data, "1", "0");
    let again = airnet(&["gen-data", "--out", s(&data), "--count", "1"]);
    assert_eq!(again.status.code(), Some(1));
    ok(&["gen-data", "--out", s(&data), "--count", "1", "--force"]);

    let empty = tmp.path().join("empty.xyz");
    std::fs::write(&empty, "").unwrap();
    let run = tmp.path().join("run");
    let mut args = vec!["train", "--data", s(&data), "--out", s(&run), "--epochs", "0"];
    args.extend_from_slice(MODEL);
    ok(&args);
    let r = airnet(&["reconstruct", "--checkpoint", s(&run.join("best.ckpt")), "--input", s(&empty), "--out", s(&tmp.path().join("r"))]);
    assert_eq!(r.status.code(), Some(1));

    let meshes = tmp.path().join("meshes");
    std::fs::create_dir(&meshes).unwrap();
    let e = airnet(&["eval", "--data", s(&data), "--meshes", s(&meshes), "--out", s(&tmp.path().join("e"))]);
    assert_eq!(e.status.code(), Some(1));
}

#[test]
fn config_file_is_overridden_by_flags() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("gen.txt");
    std::fs::write(&cfg, "count=3\npoints=32\nsupervision=100\n").unwrap();
    let data = tmp.path().join("data");
    ok(&["gen-data", "--config", s(&cfg), "--out", s(&data), "--count", "2"]);
    let echo = std::fs::read_to_string(data.join("config.txt")).unwrap();
    assert!(echo.contains("count=2\n") && echo.contains("points=32\n"));
    assert!(data.join("shape_00001").exists() && !data.join("shape_00002").exists());
}

#[test]
fn gradcheck_detects_injected_fault() {
    let good = ok(&["gradcheck"]);
    assert!(String::from_utf8_lossy(&good.stdout).contains("PASS"));
    let bad = airnet(&["gradcheck", "--inject-fault", "relu-leak"]);
    assert_eq!(bad.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&bad.stdout).contains("FAIL"));
}

#[test]
fn help_succeeds() {
    let out = ok(&["--help"]);
    let text = String::from_utf8(out.stdout).unwrap();
    for cmd in ["gen-data", "train", "reconstruct", "eval", "ablate", "gradcheck"] {
        assert!(text.contains(cmd), "{cmd}");
    }
}
