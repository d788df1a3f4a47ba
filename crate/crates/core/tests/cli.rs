use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

fn sqvi(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_sqvi"))
        .args(args)
        .env_remove("SQVI_OUT_DIR")
        .output()
        .expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exited normally")
}

fn stdout_json(out: &Output) -> Value {
    serde_json::from_slice(&out.stdout).expect("stdout is JSON")
}

fn csv_rows(path: &Path) -> Vec<Vec<String>> {
    fs::read_to_string(path)
        .unwrap()
        .lines()
        .map(|l| l.split(',').map(str::to_owned).collect())
        .collect()
}

#[test]
fn oracle_finds_the_builtin_equilibrium() {
    let out = sqvi(&["oracle", "--game", "paper-sec5"]);
    assert_eq!(code(&out), 0);
    let report = stdout_json(&out);
    assert_eq!(report["multiplicity"], 1);
    assert_eq!(report["candidates"], 8);
    let cert = &report["certificates"][0];
    assert_eq!(cert["pair"]["leader"], serde_json::json!([1]));
}

#[test]
fn generated_game_passes_check() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("g.json");
    let p = path.to_str().unwrap();
    assert_eq!(code(&sqvi(&["gen", "--seed", "7", "--dims", "3,2,2", "--gamma", "0.9", "--out", p])), 0);
    let out = sqvi(&["check", "--game", p]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stdout));
}

#[test]
fn corrupted_games_fail_check() {
    let dir = tempfile::tempdir().unwrap();
    let out = sqvi(&["gen", "--seed", "3", "--dims", "1,1,2", "--gamma", "0.5"]);
    let text = String::from_utf8(out.stdout).unwrap();

    let truncated = dir.path().join("truncated.json");
    fs::write(&truncated, &text[..text.len() / 2]).unwrap();
    let out = sqvi(&["check", "--game", truncated.to_str().unwrap()]);
    assert_eq!(code(&out), 1);
    assert!(String::from_utf8_lossy(&out.stdout).starts_with("invalid:"));

    let mut game: Value = serde_json::from_str(&text).unwrap();
    game["transition"][0][0][1][0] = serde_json::json!(0.75);
    game["reward_leader"][0][0][0] = serde_json::json!(3.0);
    let bad = dir.path().join("bad.json");
    fs::write(&bad, game.to_string()).unwrap();
    let out = sqvi(&["check", "--game", bad.to_str().unwrap()]);
    assert_eq!(code(&out), 1);
    let listing = String::from_utf8_lossy(&out.stdout);
    assert_eq!(listing.lines().filter(|l| l.starts_with("violation:")).count(), 2, "{listing}");
}

#[test]
fn usage_errors_exit_two() {
    assert_eq!(code(&sqvi(&["bogus"])), 2);
    assert_eq!(code(&sqvi(&["run", "--iters", "-3"])), 2);
    assert_eq!(code(&sqvi(&["run", "--seeds", "5..1"])), 2);
    assert_eq!(code(&sqvi(&["run", "--eps", "fixed:-1"])), 2);
    assert_eq!(code(&sqvi(&["gen", "--seed", "1", "--dims", "2,2", "--gamma", "0.5"])), 2);
    assert_eq!(code(&sqvi(&["gen", "--seed", "1", "--dims", "2,2,2", "--gamma", "1.0"])), 2);
    assert_eq!(code(&sqvi(&["check", "--game", "/nonexistent/g.json"])), 2);
}

#[test]
fn zero_iterations_give_single_row_traces() {
    let dir = tempfile::tempdir().unwrap();
    let out = sqvi(&["run", "--iters", "0", "--seeds", "0..2", "--out", dir.path().to_str().unwrap()]);
    assert_eq!(code(&out), 0);
    for seed in 0..=2 {
        let rows = csv_rows(&dir.path().join(format!("seed_{seed}.csv")));
        assert_eq!(rows.len(), 2);
        assert_eq!(rows[0][0], "k");
        assert_eq!(rows[1][0], "0");
    }
}

#[test]
fn fixed_eps_sets_the_asymptote() {
    let dir = tempfile::tempdir().unwrap();
    let out = sqvi(&["run", "--eps", "fixed:10", "--seeds", "1", "--out", dir.path().to_str().unwrap()]);
    assert_eq!(code(&out), 0);
    let summary = stdout_json(&out);
    let asymptote = summary["seeds"][0]["bounds"]["asymptote"].as_f64().unwrap();
    assert!((asymptote - 150.0).abs() < 1e-9);
}

#[test]
fn out_dir_comes_from_the_environment() {
    let dir = tempfile::tempdir().unwrap();
    let status = Command::new(env!("CARGO_BIN_EXE_sqvi"))
        .args(["run", "--iters", "3", "--seeds", "4"])
        .env("SQVI_OUT_DIR", dir.path())
        .output()
        .unwrap();
    assert_eq!(code(&status), 0);
    assert!(dir.path().join("seed_4.csv").is_file());
    assert!(dir.path().join("summary.json").is_file());
}

#[test]
fn experiment_writes_figure_data() {
    let dir = tempfile::tempdir().unwrap();
    let out = sqvi(&["experiment", "--out", dir.path().to_str().unwrap()]);
    assert_eq!(code(&out), 0);
    for name in ["fig1_epsilon.csv", "fig2_leader_error.csv", "fig3_follower_error.csv", "summary.json"] {
        assert!(dir.path().join(name).is_file(), "{name}");
    }
    let fig1 = csv_rows(&dir.path().join("fig1_epsilon.csv"));
    assert_eq!(fig1[0], ["k", "eps_max", "eps_mean", "eps_global"]);
    assert_eq!(fig1.len(), 62);
    for row in &fig1[1..] {
        let max: f64 = row[1].parse().unwrap();
        let mean: f64 = row[2].parse().unwrap();
        assert!(max >= mean);
    }
    let checks = &stdout_json(&out)["checks"];
    assert_eq!(checks["errors_below_bounds"], true);
    assert_eq!(checks["bounds_non_vanishing"], true);
    assert_eq!(checks["eps_nonincreasing_after_burn_in"], true);
}

#[test]
fn identical_runs_are_byte_identical() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    for dir in [&a, &b] {
        let out = sqvi(&["run", "--iters", "20", "--seeds", "0..4", "--out", dir.path().to_str().unwrap()]);
        assert_eq!(code(&out), 0);
    }
    for seed in 0..=4 {
        let name = format!("seed_{seed}.csv");
        assert_eq!(fs::read(a.path().join(&name)).unwrap(), fs::read(b.path().join(&name)).unwrap());
    }
    assert_eq!(fs::read(a.path().join("summary.json")).unwrap(), fs::read(b.path().join("summary.json")).unwrap());
}

#[test]
fn run_without_equilibrium_reports_and_skips_bounds() {
    let dir = tempfile::tempdir().unwrap();
    let game = dir.path().join("g.json");
    let out = sqvi(&["gen", "--seed", "11", "--dims", "2,2,2", "--gamma", "0.9", "--out", game.to_str().unwrap()]);
    assert_eq!(code(&out), 0);
    let out = sqvi(&["run", "--game", game.to_str().unwrap(), "--iters", "5", "--seeds", "0", "--out", dir.path().to_str().unwrap()]);
    assert_eq!(code(&out), 0);
    let summary = stdout_json(&out);
    if summary["reference"].is_null() {
        assert!(summary["seeds"][0]["bounds"].is_null());
        assert!(!summary["notes"].as_array().unwrap().is_empty());
    } else {
        assert!(summary["seeds"][0]["final_err_leader"].is_number());
    }
}
