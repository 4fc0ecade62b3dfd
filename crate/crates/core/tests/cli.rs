use std::process::{Command, Output};

fn trav(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_trav"))
        .args(args)
        .env("RUST_LOG", "error")
        .output()
        .unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[test]
fn eval_without_checkpoints_names_the_producer() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().to_str().unwrap();
    let o = trav(&["gen-world", "--out", out, "--profile", "fast"]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(dir.path().join("config.txt").exists());
    let o = trav(&["eval", "--out", out]);
    assert_eq!(o.status.code(), Some(3));
    assert!(
        stderr(&o).contains("run `trav train-visual` first"),
        "{}",
        stderr(&o)
    );
}

#[test]
fn empty_run_dir_asks_for_the_world_first() {
    let dir = tempfile::tempdir().unwrap();
    let o = trav(&[
        "train-sensor",
        "--out",
        dir.path().to_str().unwrap(),
        "--profile",
        "fast",
    ]);
    assert_eq!(o.status.code(), Some(3));
    assert!(stderr(&o).contains("run `trav gen-world` first"));
}

#[test]
fn bad_configuration_exits_with_code_2() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().to_str().unwrap();
    for args in [
        vec!["gen-world", "--out", out, "--set", "world.terrains=1"],
        vec!["gen-world", "--out", out, "--set", "no.such.key=3"],
        vec!["gen-world", "--out", out, "--set", "world.rows"],
        vec!["gen-world", "--out", out, "--profile", "huge"],
    ] {
        let o = trav(&args);
        assert_eq!(o.status.code(), Some(2), "{args:?}: {}", stderr(&o));
    }
    let cfg = dir.path().join("bad.txt");
    std::fs::write(&cfg, "replay.t_r = 0\n").unwrap();
    let o = trav(&["gen-world", "--out", out, "--config", cfg.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn usage_errors_are_reported_by_the_parser() {
    let o = trav(&["plan", "--start", "3"]);
    assert!(!o.status.success());
    let o = trav(&["ablate"]);
    assert!(!o.status.success());
    let o = trav(&["--help"]);
    assert!(o.status.success());
    let help = String::from_utf8_lossy(&o.stdout);
    for cmd in [
        "gen-world",
        "train-sensor",
        "train-visual",
        "map",
        "plan",
        "eval",
        "ablate",
        "run",
    ] {
        assert!(help.contains(cmd), "missing {cmd}");
    }
}
