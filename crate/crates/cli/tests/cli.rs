use std::process::{Command, Output};

fn echoloc(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_echoloc"))
        .args(args)
        .current_dir(concat!(env!("CARGO_MANIFEST_DIR"), "/../.."))
        .output()
        .unwrap()
}

fn stdout(out: &Output) -> String {
    String::from_utf8(out.stdout.clone()).unwrap()
}

#[test]
fn counterexample_prints_equal_distances() {
    let out = echoloc(&["counterexample", "--k", "3"]);
    assert!(out.status.success());
    let text = stdout(&out);
    let dists: Vec<f64> = text
        .lines()
        .filter(|l| l.trim_start().starts_with("|r"))
        .map(|l| l.rsplit('=').next().unwrap().trim().parse().unwrap())
        .collect();
    assert_eq!(dists.len(), 3);
    assert!(dists.iter().all(|d| (d - dists[0]).abs() < 1e-9));
    assert!(text.contains("distance-preserving permutations: 6"));
}

#[test]
fn genericity_names_the_vanishing_factor() {
    let out = echoloc(&["genericity", "scenarios/rect2d.toml", "--speaker", "8,5"]);
    assert!(out.status.success());
    let text = stdout(&out);
    assert!(text.starts_with("failed"), "{text}");
    assert!(text.contains("h["));

    let out = echoloc(&["genericity", "scenarios/rect2d.toml", "--speaker", "6.3,7.1"]);
    assert!(stdout(&out).starts_with("passed"));
}

#[test]
fn onboard_half_turn_is_ambiguous() {
    let out = echoloc(&["ambiguity", "scenarios/rect_onboard.toml", "--pose-a", "0", "--pose-b", "1"]);
    assert!(out.status.success());
    let text = stdout(&out);
    let line = text.lines().find(|l| l.starts_with("max entry difference")).unwrap();
    let value: f64 = line.rsplit(':').next().unwrap().trim().parse().unwrap();
    assert!(value <= 1e-9, "{line}");
}

#[test]
fn run_writes_requested_export() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("box.csv");
    let out = echoloc(&[
        "run",
        "scenarios/box_room.toml",
        "--noise",
        "1e-3",
        "--seed",
        "3",
        "--out",
        path.to_str().unwrap(),
        "--format",
        "csv",
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(stdout(&out).contains("bootstrap"));
    let csv = std::fs::read_to_string(path).unwrap();
    assert_eq!(csv.lines().count(), 11);
}

#[test]
fn out_without_format_is_rejected() {
    let out = echoloc(&["run", "scenarios/box_room.toml", "--out", "x.csv"]);
    assert!(!out.status.success());
}

#[test]
fn unknown_flag_is_rejected() {
    let out = echoloc(&["run", "scenarios/box_room.toml", "--bogus"]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("--bogus"));
}

#[test]
fn missing_scenario_reports_error() {
    let out = echoloc(&["run", "does/not/exist.toml"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).starts_with("error:"));
}
