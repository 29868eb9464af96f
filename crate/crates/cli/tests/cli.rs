use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn deepball(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_deepball"))
        .current_dir(dir)
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let out = deepball(dir, args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn tree(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut files: Vec<_> = fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let e = e.unwrap();
            (e.file_name().into_string().unwrap(), fs::read(e.path()).unwrap())
        })
        .collect();
    files.sort();
    files
}

#[test]
fn synth_twice_gives_identical_directories() {
    let d = tempfile::tempdir().unwrap();
    ok(d.path(), &["synth", "--out-dir", "a", "--count", "10", "--seed", "7"]);
    ok(d.path(), &["synth", "--out-dir", "b", "--count", "10", "--seed", "7"]);
    let a = tree(&d.path().join("a"));
    assert_eq!(a.len(), 11);
    assert_eq!(a, tree(&d.path().join("b")));
}

#[test]
fn synth_refuses_a_non_empty_directory_and_leaves_no_staging() {
    let d = tempfile::tempdir().unwrap();
    fs::create_dir(d.path().join("a")).unwrap();
    fs::write(d.path().join("a/keep.txt"), "x").unwrap();
    let out = deepball(d.path(), &["synth", "--out-dir", "a", "--count", "2"]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("not empty"));
    assert_eq!(fs::read_dir(d.path()).unwrap().count(), 1);
}

#[test]
fn unknown_flags_and_missing_files_fail() {
    let d = tempfile::tempdir().unwrap();
    let out = deepball(d.path(), &["synth", "--bogus"]);
    assert!(!out.status.success());
    assert!(out.stdout.is_empty());

    let out = deepball(
        d.path(),
        &[
            "detect",
            "--checkpoint",
            "none.ckpt",
            "--image",
            "none.png",
            "--overlay",
            "o.png",
        ],
    );
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("none.ckpt"));
    assert_eq!(fs::read_dir(d.path()).unwrap().count(), 0);
}

#[test]
fn failed_training_leaves_no_outputs() {
    let d = tempfile::tempdir().unwrap();
    ok(d.path(), &["synth", "--out-dir", "s", "--count", "4", "--seed", "1"]);
    // A crop larger than the scaled frames is rejected mid-run.
    let out = deepball(
        d.path(),
        &[
            "train",
            "--manifest",
            "s/manifest.txt",
            "--out-checkpoint",
            "m.ckpt",
            "--epochs",
            "2",
            "--crop",
            "512x512",
            "--log",
            "log.txt",
        ],
    );
    assert!(!out.status.success());
    let names: Vec<_> = fs::read_dir(d.path())
        .unwrap()
        .map(|e| e.unwrap().file_name())
        .collect();
    assert_eq!(names, vec!["s"]);
}

#[test]
fn small_pipeline_produces_a_report_and_detections() {
    let d = tempfile::tempdir().unwrap();
    let p = d.path();
    ok(p, &["synth", "--out-dir", "train", "--count", "16", "--seed", "1"]);
    ok(p, &["synth", "--out-dir", "test", "--count", "4", "--seed", "2"]);
    let log = ok(
        p,
        &[
            "train",
            "--manifest",
            "train/manifest.txt",
            "--out-checkpoint",
            "m.ckpt",
            "--epochs",
            "2",
            "--crop",
            "128x128",
            "--batch-size",
            "8",
            "--seed",
            "3",
            "--val-manifest",
            "test/manifest.txt",
        ],
    );
    let lines: Vec<&str> = log.lines().collect();
    assert_eq!(lines.len(), 4);
    for l in &lines {
        let fields: Vec<&str> = l.split(", ").collect();
        assert_eq!(fields.len(), 6, "{l}");
        assert!(fields[3].parse::<f64>().unwrap().is_finite());
    }
    assert!(lines[0].starts_with("1, 1, 1e-3, "));
    assert!(lines[3].starts_with("2, 4, 1e-4, "));
    assert!(p.join("m.ckpt.best").is_file());

    let theta: f32 = ok(
        p,
        &[
            "calibrate",
            "--checkpoint",
            "m.ckpt",
            "--manifest",
            "train/manifest.txt",
        ],
    )
    .trim()
    .parse()
    .unwrap();
    assert!((0.0..=1.0).contains(&theta));
    let report = ok(
        p,
        &[
            "eval",
            "--checkpoint",
            "m.ckpt",
            "--manifest",
            "test/manifest.txt",
            "--theta",
            &theta.to_string(),
            "--csv",
            "frames.csv",
        ],
    );
    let keys: Vec<&str> = report.lines().map(|l| l.split(" = ").next().unwrap()).collect();
    assert_eq!(
        keys,
        [
            "ap",
            "accuracy",
            "theta",
            "tolerance_px",
            "fps",
            "frames",
            "ball_frames",
            "empty_frames",
            "tp",
            "fp",
            "fn",
            "tn"
        ]
    );
    let csv = fs::read_to_string(p.join("frames.csv")).unwrap();
    assert_eq!(csv.lines().count(), 5);
    assert_eq!(csv.lines().next(), Some("frame_id,outcome,conf,x,y"));

    let dets = ok(
        p,
        &[
            "detect",
            "--checkpoint",
            "m.ckpt",
            "--image",
            "test/frame_0001.png",
            "--theta",
            "0",
            "--max-balls",
            "3",
            "--overlay",
            "overlay.png",
        ],
    );
    assert_eq!(dets.lines().count(), 3);
    for l in dets.lines() {
        let f: Vec<f64> = l.split(' ').map(|v| v.parse().unwrap()).collect();
        assert!(f[0] < 256.0 && f[1] < 256.0 && (0.0..=1.0).contains(&f[2]));
    }
    let overlay = image::open(p.join("overlay.png")).unwrap();
    assert_eq!((overlay.width(), overlay.height()), (256, 256));

    let none = ok(
        p,
        &[
            "detect",
            "--checkpoint",
            "m.ckpt",
            "--image",
            "test/frame_0001.png",
            "--theta",
            "1.01",
        ],
    );
    assert!(none.is_empty());
}

#[test]
fn resumed_training_matches_an_uninterrupted_run() {
    let d = tempfile::tempdir().unwrap();
    let p = d.path();
    ok(p, &["synth", "--out-dir", "s", "--count", "8", "--seed", "4"]);
    let common = [
        "--manifest",
        "s/manifest.txt",
        "--crop",
        "64x64",
        "--batch-size",
        "4",
        "--lr-drop-epoch",
        "2",
    ];
    let mut full: Vec<&str> = vec!["train", "--out-checkpoint", "full.ckpt", "--epochs", "3"];
    full.extend(common);
    let full_log = ok(p, &full);

    let mut first: Vec<&str> = vec!["train", "--out-checkpoint", "half.ckpt", "--epochs", "1"];
    first.extend(common);
    let mut log = ok(p, &first);
    let mut rest: Vec<&str> = vec![
        "train",
        "--out-checkpoint",
        "resumed.ckpt",
        "--epochs",
        "3",
        "--resume",
        "half.ckpt",
    ];
    rest.extend(common);
    log.push_str(&ok(p, &rest));

    assert_eq!(log, full_log);
    assert_eq!(
        fs::read(p.join("resumed.ckpt")).unwrap(),
        fs::read(p.join("full.ckpt")).unwrap()
    );
}

#[test]
fn bench_prints_fps() {
    let d = tempfile::tempdir().unwrap();
    let out = ok(
        d.path(),
        &["bench", "--size", "64x96", "--iters", "2", "--no-hypercolumn"],
    );
    let fps: f64 = out
        .lines()
        .next()
        .unwrap()
        .strip_prefix("fps = ")
        .unwrap()
        .parse()
        .unwrap();
    assert!(fps > 0.0);
    let out = deepball(d.path(), &["bench", "--size", "64x96", "--iters", "0"]);
    assert!(!out.status.success());
}
