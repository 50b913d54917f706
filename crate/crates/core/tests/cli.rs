use std::process::{Command, Output};

fn ccmppi(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ccmppi")).args(args).output().expect("spawn ccmppi")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[test]
fn quantiles_command_succeeds() {
    let o = ccmppi(&["quantiles"]);
    assert!(o.status.success());
    let text = String::from_utf8(o.stdout).unwrap();
    assert!(text.contains("5.991464547107"), "{text}");
}

#[test]
fn bad_inputs_exit_nonzero_with_one_line() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.toml");
    std::fs::write(&cfg, "[mppi]\nsamples = 0\n").unwrap();
    let unknown = dir.path().join("unknown.toml");
    std::fs::write(&unknown, "[mppi]\nsamplez = 10\n").unwrap();
    for args in [
        vec!["track", "--config", cfg.to_str().unwrap()],
        vec!["track", "--config", unknown.to_str().unwrap()],
        vec!["avoid", "--config", dir.path().join("missing.toml").to_str().unwrap()],
        vec!["track", "--workers", "0"],
    ] {
        let o = ccmppi(&args);
        assert!(!o.status.success(), "{args:?} should fail");
        let err = stderr(&o);
        assert_eq!(err.trim_end().lines().count(), 1, "{args:?}: {err}");
        assert!(err.starts_with("error: "), "{err}");
        assert!(o.stdout.is_empty());
    }
}

#[test]
fn unknown_planner_is_a_usage_error() {
    let o = ccmppi(&["track", "--planner", "teleport"]);
    assert!(!o.status.success());
    assert!(stderr(&o).contains("teleport"));
}

#[test]
fn train_writes_model_and_edd5_table() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("small.toml");
    std::fs::write(&cfg, "[training]\ngp_points = 60\nedd5_points = 400\n").unwrap();
    let model = dir.path().join("m.gp");
    let o = ccmppi(&["train", "--config", cfg.to_str().unwrap(), "--out", model.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(ccmppi::gp::TerrainGpEnsemble::load(&model).unwrap().terrain_count() == 3);
    let table = std::fs::read_to_string(dir.path().join("m.gp.edd5.csv")).unwrap();
    assert!(table.starts_with("terrain,alpha_l,alpha_r,x_icr,y_icr_l,y_icr_r"));
    assert_eq!(table.lines().count(), 4);
}

#[test]
fn track_writes_results_and_ticks() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.toml");
    std::fs::write(
        &cfg,
        "[training]\ngp_points = 60\nedd5_points = 400\n[mppi]\nsamples = 32\nhorizon = 10\n[tracking]\ndistance = 2.0\n",
    )
    .unwrap();
    let out = dir.path().join("r.csv");
    let o = ccmppi(&[
        "track",
        "--config",
        cfg.to_str().unwrap(),
        "--planner",
        "unicycle",
        "--out",
        out.to_str().unwrap(),
        "--plot-data",
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let results = std::fs::read_to_string(&out).unwrap();
    assert!(results.starts_with("# ccmppi-results/1 config_sha256="));
    assert!(results.lines().any(|l| l.starts_with("run,unicycle,tracking,circle,tile")));
    let ticks = std::fs::read_to_string(dir.path().join("r.csv.ticks.csv")).unwrap();
    assert!(ticks.lines().count() > 10);
}
