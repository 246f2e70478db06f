use std::path::{Path, PathBuf};

use crate::commands;
use crate::Common;

fn small_config(dir: &Path) -> PathBuf {
    let path = dir.join("small.toml");
    std::fs::write(
        &path,
        "seed = 2\n\
         [rig]\nn_cameras = 3\nwidth = 12\nheight = 9\n\
         [trajectory]\nmodel = \"forward_constant\"\nspeed = 0.2\nn_steps = 6\n\
         [noise]\npose_sigma = 0.02\ndepth_rel_sigma = 0.1\n\
         [pipeline]\nwarmup_flow_threshold = 0.3\nkeyframe_flow_threshold = 0.3\n",
    )
    .unwrap();
    path
}

fn common(config: Option<&Path>, out: PathBuf) -> Common {
    Common { config: config.map(Path::to_path_buf), seed: None, out }
}

fn code<T>(r: Result<T, crate::Failure>) -> u8 {
    r.err().map_or(0, |f| f.code)
}

#[test]
fn simulate_solve_eval_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path());
    let (bundle, sol, ev) = (dir.path().join("b"), dir.path().join("s"), dir.path().join("e"));
    commands::simulate(&common(Some(&cfg), bundle.clone())).unwrap();
    assert!(bundle.join("manifest.toml").is_file());
    commands::solve(&bundle, &common(Some(&cfg), sol.clone())).unwrap();
    assert!(sol.join("trajectory.tum").is_file());
    commands::eval(&bundle, &sol, &common(Some(&cfg), ev.clone())).unwrap();
    let report = std::fs::read_to_string(ev.join("metrics.txt")).unwrap();
    assert!(report.starts_with("frames: "));
}

#[test]
fn graph_dumps_every_step() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path());
    commands::graph(&common(Some(&cfg), dir.path().to_path_buf())).unwrap();
    let text = std::fs::read_to_string(dir.path().join("graph.txt")).unwrap();
    assert_eq!(text.lines().filter(|l| l.starts_with("# step ")).count(), 6);
}

#[test]
fn unknown_config_field_is_a_validation_failure() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.toml");
    std::fs::write(&cfg, "[rig]\nn_cameras = 3\nlens = \"fisheye\"\n").unwrap();
    assert_eq!(code(commands::graph(&common(Some(&cfg), dir.path().to_path_buf()))), 2);
}

#[test]
fn out_of_range_config_value_is_a_validation_failure() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.toml");
    std::fs::write(&cfg, "[rig]\nn_cameras = 0\n").unwrap();
    assert_eq!(code(commands::simulate(&common(Some(&cfg), dir.path().join("b")))), 2);
}

#[test]
fn missing_inputs_are_runtime_failures() {
    let dir = tempfile::tempdir().unwrap();
    let nowhere = dir.path().join("nowhere");
    assert_eq!(code(commands::solve(&nowhere, &common(None, dir.path().join("s")))), 1);
    let none = dir.path().join("none.toml");
    assert_eq!(code(commands::graph(&common(Some(&none), dir.path().to_path_buf()))), 1);
}

#[test]
fn corrupted_bundle_is_a_validation_failure() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path());
    let bundle = dir.path().join("b");
    commands::simulate(&common(Some(&cfg), bundle.clone())).unwrap();
    let depth = std::fs::read_dir(bundle.join("depth")).unwrap().next().unwrap().unwrap().path();
    let bytes = std::fs::read(&depth).unwrap();
    std::fs::write(&depth, &bytes[..bytes.len() - 4]).unwrap();
    assert_eq!(code(commands::solve(&bundle, &common(Some(&cfg), dir.path().join("s")))), 2);
}

#[test]
fn failures_map_to_exit_codes() {
    assert_eq!(crate::Failure::runtime("x").code, 1);
    assert_eq!(crate::Failure::validation("x").code, 2);
}
