mod common;

use std::fs;
use std::process::Command;

use common::*;
use untomo::io::read_raw_image;
use untomo::metrics::register_and_rmse;
use untomo::pipeline::{run_pipeline, run_stages, Stage};

fn report_text(dir: &std::path::Path) -> String {
    fs::read_to_string(dir.join(Stage::Evaluate.dir_name()).join("report.txt")).unwrap()
}

#[test]
fn rerun_reproduces_the_report_bit_identically() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tiny_pipeline_config(tmp.path(), 41);
    let first = run_pipeline(&cfg).unwrap();
    let text = report_text(tmp.path());

    let again = run_stages(&cfg, Stage::Evaluate).unwrap();
    assert!(again.timings.iter().all(|t| t.cached));
    assert_eq!(again.report.unwrap(), first);

    let fresh = tempfile::tempdir().unwrap();
    let cfg2 = tiny_pipeline_config(fresh.path(), 41);
    run_pipeline(&cfg2).unwrap();
    assert_eq!(
        report_text(fresh.path()).replace(fresh.path().to_str().unwrap(), ""),
        text.replace(tmp.path().to_str().unwrap(), "")
    );
}

#[test]
fn resuming_from_persisted_stages_gives_the_same_report() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tiny_pipeline_config(tmp.path(), 42);
    let full = run_pipeline(&cfg).unwrap();
    let text = report_text(tmp.path());

    // drop everything after init-poses and resume
    for stage in [Stage::Refine, Stage::Sparse, Stage::Evaluate] {
        let _ = fs::remove_dir_all(tmp.path().join(stage.dir_name()));
    }
    let partial = run_stages(&cfg, Stage::InitPoses).unwrap();
    assert!(partial.timings.iter().all(|t| t.cached));
    let resumed = run_pipeline(&cfg).unwrap();
    assert_eq!(resumed, full);
    assert_eq!(report_text(tmp.path()), text);
}

#[test]
fn report_rmse_matches_persisted_images() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tiny_pipeline_config(tmp.path(), 43);
    let report = run_pipeline(&cfg).unwrap();
    let object = read_raw_image(&tmp.path().join(Stage::Synth.dir_name()).join("object.utimg")).unwrap();
    let image = read_raw_image(&tmp.path().join(Stage::Refine.dir_name()).join("image.utimg")).unwrap();
    assert_eq!(register_and_rmse(&object, &image).unwrap().rmse, report.rmse);
}

#[test]
fn too_few_clusters_fail_in_init_poses() {
    let tmp = tempfile::tempdir().unwrap();
    let mut cfg = tiny_pipeline_config(tmp.path(), 44);
    cfg.set("count", "200").unwrap();
    cfg.set("k_c", "2").unwrap();
    cfg.set("order", "7").unwrap();
    let err = run_pipeline(&cfg).unwrap_err();
    assert_eq!(err.stage(), Some("init-poses"));
    assert!(err.is_validation());
    assert!(err.to_string().contains("init-poses"));
    // earlier stages stay on disk
    assert!(tmp.path().join(Stage::Denoise.dir_name()).exists());
}

fn cli(args: &[&str]) -> std::process::Output {
    Command::new(env!("CARGO_BIN_EXE_untomo")).args(args).output().unwrap()
}

#[test]
fn cli_exit_codes() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("run");
    let out = out.to_str().unwrap();
    let small = ["--image", "phantom:random:3", "--side", "32", "--count", "400", "--k-c", "20"];

    let mut ok =
        vec!["run", "--out", out, "--seed", "3", "--workers", "1", "--set", "restarts=2", "--set", "outer_iters=2"];
    ok.extend(small);
    let r = cli(&ok);
    assert_eq!(r.status.code(), Some(0), "{}", String::from_utf8_lossy(&r.stderr));
    assert!(String::from_utf8_lossy(&r.stdout).contains("rmse"));

    let r = cli(&["synth", "--out", out, "--noise-pct=-1"]);
    assert_eq!(r.status.code(), Some(2));

    let mut few = vec!["run", "--out", out, "--k-c", "2"];
    few.extend(&small[..6]);
    let r = cli(&few);
    assert_eq!(r.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&r.stderr).contains("init-poses"));

    let missing = tmp.path().join("missing.pgm");
    let r = cli(&["synth", "--out", out, "--image", missing.to_str().unwrap()]);
    assert_eq!(r.status.code(), Some(3));

    let r = cli(&["evaluate", "--out", out, "--workers", "0"]);
    assert_eq!(r.status.code(), Some(2));
}

#[test]
fn config_file_and_flags_combine() {
    let tmp = tempfile::tempdir().unwrap();
    let conf = tmp.path().join("run.conf");
    fs::write(&conf, "image = phantom:random:5\nside = 32\ncount = 300\nk_c = 10\nrestarts = 1\n").unwrap();
    let out = tmp.path().join("out");
    let r = cli(&["synth", "--config", conf.to_str().unwrap(), "--out", out.to_str().unwrap(), "--count", "250"]);
    assert_eq!(r.status.code(), Some(0), "{}", String::from_utf8_lossy(&r.stderr));
    let echoed = fs::read_to_string(out.join("config.txt")).unwrap();
    assert!(echoed.contains("count = 250") || echoed.contains("count=250"), "{echoed}");
    let r = cli(&["synth", "--config", conf.to_str().unwrap(), "--out", out.to_str().unwrap(), "--set", "bogus=1"]);
    assert_eq!(r.status.code(), Some(2));
}
