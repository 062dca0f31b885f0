//! One epoch of the default configuration end to end.

use std::process::Command;
use std::time::{Duration, Instant};

fn avsurf(args: &[&str]) {
    let out = Command::new(env!("CARGO_BIN_EXE_avsurf"))
        .env("AVSURF_LOG", "warn")
        .args(args)
        .output()
        .unwrap();
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn default_scene_trains_one_epoch_within_five_minutes() {
    let dir = tempfile::tempdir().unwrap();
    let p = |n: &str| dir.path().join(n).to_string_lossy().into_owned();
    let start = Instant::now();
    avsurf(&["generate", "--out", &p("data")]);
    avsurf(&["train", "--set", "train.epochs=1", "--data", &p("data"), "--out", &p("run")]);
    let elapsed = start.elapsed();
    let log = std::fs::read_to_string(dir.path().join("run/loss.csv")).unwrap();
    assert_eq!(log.lines().count(), 2);
    let val: f64 = log.lines().nth(1).unwrap().split(',').nth(2).unwrap().parse().unwrap();
    assert!(val.is_finite());
    assert!(elapsed < Duration::from_secs(300), "took {elapsed:?}");
}
