use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn fiberlock(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_fiberlock")).args(args).output().expect("binary runs")
}

fn power_run(out: &Path, extra: &[&str]) -> Output {
    let mut args = vec!["run", "power-loop", "--out", out.to_str().unwrap(), "--set", "powerloop.duration_s=30"];
    args.extend_from_slice(extra);
    fiberlock(&args)
}

#[test]
fn unknown_override_is_rejected_before_running() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("o");
    let r = power_run(&out, &["--set", "powerloop.nope=1"]);
    assert_eq!(r.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&r.stderr).contains("powerloop.nope"));
    assert!(!out.exists());
}

#[test]
fn unknown_key_in_config_file_names_the_line() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.cfg");
    fs::write(&cfg, "# comment\nseed = 4\nplant.bogus = 2\n").unwrap();
    let out = dir.path().join("o");
    let r = power_run(&out, &["--config", cfg.to_str().unwrap()]);
    assert_eq!(r.status.code(), Some(2));
    let err = String::from_utf8_lossy(&r.stderr);
    assert!(err.contains("plant.bogus") && err.contains(":3"), "{err}");
    assert!(!out.exists());
}

#[test]
fn bad_value_and_zero_compression_are_config_errors() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("o");
    assert_eq!(power_run(&out, &["--set", "powerloop.tick_s=fast"]).status.code(), Some(2));
    assert_eq!(power_run(&out, &["--compression", "0"]).status.code(), Some(2));
    assert_eq!(fiberlock(&["run", "no-such-scenario"]).status.code(), Some(2));
}

#[test]
fn run_writes_csv_and_manifest_and_replays() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for d in [&a, &b] {
        let r = power_run(d, &["--check", "--seed", "7"]);
        assert_eq!(r.status.code(), Some(0), "{}", String::from_utf8_lossy(&r.stdout));
    }
    let csv_a = fs::read(a.join("power_loop.csv")).unwrap();
    assert_eq!(csv_a, fs::read(b.join("power_loop.csv")).unwrap());
    let text = String::from_utf8(csv_a).unwrap();
    assert_eq!(text.lines().next(), Some("setting,t_s,target_w,closed_loop_w,open_loop_w"));

    let m: serde_json::Value = serde_json::from_str(&fs::read_to_string(a.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(m["scenario"], "power-loop");
    assert_eq!(m["seed"], 7);
    assert_eq!(m["config_hash"].as_str().unwrap().len(), 64);
    assert_eq!(m["overrides"][0], "powerloop.duration_s=30");
    let f = &m["files"][0];
    assert_eq!(f["name"], "power_loop.csv");
    assert_eq!(f["bytes"].as_u64().unwrap() as usize, text.len());
    assert!(m["checks"].as_array().unwrap().iter().all(|c| c["passed"] == true));
}

#[test]
fn failed_check_exits_three() {
    let dir = tempfile::tempdir().unwrap();
    // an integrating loop with no gain cannot follow the drift
    let r = power_run(&dir.path().join("o"), &["--check", "--set", "power.loop_gain=0"]);
    assert_eq!(r.status.code(), Some(3), "{}", String::from_utf8_lossy(&r.stdout));
    let r = power_run(&dir.path().join("p"), &["--set", "power.loop_gain=0"]);
    assert_eq!(r.status.code(), Some(0));
}

#[test]
fn several_seeds_get_their_own_directories() {
    let dir = tempfile::tempdir().unwrap();
    let r = power_run(dir.path(), &["--seed", "1,2", "--jobs", "2"]);
    assert_eq!(r.status.code(), Some(0));
    for s in ["seed-1", "seed-2"] {
        assert!(dir.path().join(s).join("manifest.json").exists());
    }
}

#[test]
fn help_lists_columns() {
    let r = fiberlock(&["run", "--help"]);
    let text = String::from_utf8_lossy(&r.stdout);
    assert!(text.contains("delta_theta_rad,beta") && text.contains("manifest.json"), "{text}");
}
