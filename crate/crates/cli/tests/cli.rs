use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const TINY: &str = r#"
[backbone]
feature_dim = 16
base_channels = 4

[matcher]
num_layers = 1
ffn_expansion = 1

[optimizer]
steps = 3
batch_size = 1
learning_rate = 0.001

[training]
crop_size = 32

[data.scene]
canvas_size = [32, 32]
sprite_size_range = [8, 12]
num_frames = 6

[tracker]
eval_stride = 4
"#;

fn gmrw(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_gmrw"))
        .current_dir(dir)
        .env("GMRW_LOG_LEVEL", "warn")
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(dir: &Path, args: &[&str]) -> Output {
    let out = gmrw(dir, args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    out
}

fn setup() -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("tiny.toml"), TINY).unwrap();
    ok(dir.path(), &["--config", "tiny.toml", "--seed", "3", "generate", "--out", "gen"]);
    dir
}

#[test]
fn help_and_version_exit_zero() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(gmrw(dir.path(), &["--help"]).status.code(), Some(0));
    assert_eq!(gmrw(dir.path(), &["--version"]).status.code(), Some(0));
}

#[test]
fn usage_errors_exit_one() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(gmrw(dir.path(), &["frobnicate"]).status.code(), Some(1));
    let bad_stride = ["track", "--checkpoint", "c", "--frames", "f", "--queries", "q", "--out", "o", "--stride", "3"];
    assert_eq!(gmrw(dir.path(), &bad_stride).status.code(), Some(1));
    fs::write(dir.path().join("bad.toml"), "[optimizer]\nstepz = 1\n").unwrap();
    assert_eq!(gmrw(dir.path(), &["--config", "bad.toml", "train"]).status.code(), Some(1));
}

#[test]
fn runtime_errors_exit_two() {
    let dir = setup();
    let missing = ["track", "--checkpoint", "missing.ckpt", "--frames", "gen/frames", "--queries", "gen/queries.jsonl", "--out", "p"];
    assert_eq!(gmrw(dir.path(), &missing).status.code(), Some(2));
    fs::write(dir.path().join("broken.jsonl"), "{\"id\":0,\"query\":[0,1,1]}\n{\"id\":1}\n").unwrap();
    let out = gmrw(dir.path(), &["eval", "--pred", "broken.jsonl", "--gt", "gen/gt.jsonl"]);
    assert_eq!(out.status.code(), Some(2));
    let msg = String::from_utf8_lossy(&out.stderr);
    assert!(msg.contains("broken.jsonl:1:") && msg.contains("xy"), "{msg}");
}

#[test]
fn ground_truth_scores_perfectly_in_any_order() {
    let dir = setup();
    let p = dir.path();
    let report = String::from_utf8(ok(p, &["eval", "--pred", "gen/gt.jsonl", "--gt", "gen/gt.jsonl"]).stdout).unwrap();
    for key in ["aj 1.000000", "delta_avg 1.000000", "oa 1.000000"] {
        assert!(report.contains(key), "{report}");
    }
    let mut lines: Vec<_> = fs::read_to_string(p.join("gen/gt.jsonl")).unwrap().lines().map(String::from).collect();
    lines.reverse();
    fs::write(p.join("shuffled.jsonl"), lines.join("\n")).unwrap();
    let a = ok(p, &["eval", "--pred", "shuffled.jsonl", "--gt", "gen/gt.jsonl"]).stdout;
    let b = ok(p, &["eval", "--pred", "gen/gt.jsonl", "--gt", "shuffled.jsonl"]).stdout;
    assert_eq!(a, report.as_bytes());
    assert_eq!(b, report.as_bytes());
}

#[test]
fn training_writes_log_and_reloadable_config() {
    let dir = setup();
    let p = dir.path();
    ok(p, &["--config", "tiny.toml", "--seed", "5", "train", "--no-smoothness", "--out", "a"]);
    let log = fs::read_to_string(p.join("a/loss.csv")).unwrap();
    let rows: Vec<_> = log.lines().collect();
    assert_eq!(rows[0], "step,crw,smooth,total,valid_row_fraction");
    assert_eq!(rows.len(), 4);
    assert!(rows[1..].iter().all(|r| r.split(',').nth(2) == Some("0.000000")));
    // The effective config reproduces the run exactly.
    ok(p, &["--config", "a/model.toml", "train", "--out", "b"]);
    assert_eq!(fs::read(p.join("a/model.ckpt")).unwrap(), fs::read(p.join("b/model.ckpt")).unwrap());
    assert_eq!(fs::read(p.join("a/loss.csv")).unwrap(), fs::read(p.join("b/loss.csv")).unwrap());
}

#[test]
fn tracking_is_deterministic_and_follows_the_schema() {
    let dir = setup();
    let p = dir.path();
    ok(p, &["--config", "tiny.toml", "train", "--out", "run"]);
    let track = |out: &str, mode: &str| {
        ok(p, &[
            "--config", "tiny.toml", "track", "--checkpoint", "run/model.ckpt", "--frames", "gen/frames",
            "--queries", "gen/queries.jsonl", "--mode", mode, "--out", out,
        ]);
        fs::read(p.join(out)).unwrap()
    };
    let a = track("a.jsonl", "chained");
    assert_eq!(a, track("b.jsonl", "chained"));
    assert_ne!(a, track("c.jsonl", "direct"));
    let records = gmrw::trackio::read_track_file(&p.join("a.jsonl"), true).unwrap();
    let queries = gmrw::trackio::read_track_file(&p.join("gen/queries.jsonl"), false).unwrap();
    assert_eq!(records.len(), queries.len());
    for (r, q) in records.iter().zip(&queries) {
        assert_eq!((r.id, r.query), (q.id, q.query));
        assert_eq!(r.xy.len(), 6);
        assert_eq!(r.size, Some([32, 32]));
    }
}

#[test]
fn mismatched_config_is_rejected_at_tracking() {
    let dir = setup();
    let p = dir.path();
    ok(p, &["--config", "tiny.toml", "train", "--out", "run"]);
    fs::write(p.join("other.toml"), TINY.replace("feature_dim = 16", "feature_dim = 8")).unwrap();
    let args = [
        "--config", "other.toml", "track", "--checkpoint", "run/model.ckpt", "--frames", "gen/frames",
        "--queries", "gen/queries.jsonl", "--out", "x.jsonl",
    ];
    assert_eq!(gmrw(p, &args).status.code(), Some(2));
}

#[test]
fn flow_image_covers_the_frame_and_is_stable() {
    let dir = setup();
    let p = dir.path();
    ok(p, &["--config", "tiny.toml", "train", "--out", "run"]);
    let viz = |out: &str| {
        ok(p, &["--config", "tiny.toml", "flowviz", "--checkpoint", "run/model.ckpt", "--frames", "gen/frames", "--out", out]);
        fs::read(p.join(out)).unwrap()
    };
    assert_eq!(viz("f1.png"), viz("f2.png"));
    let img = image::open(p.join("f1.png")).unwrap();
    assert_eq!((img.width(), img.height()), (32, 32));
}
