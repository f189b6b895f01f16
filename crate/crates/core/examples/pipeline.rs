//! Run every stage on a small dataset. Extra `key=value` arguments override
//! the configuration, e.g. `noise_pct=20 max_shift=2`.

use untomo::pipeline::{run_stages, PipelineConfig, Stage};

fn main() -> untomo::Result<()> {
    let mut cfg = PipelineConfig::default();
    for (k, v) in [
        ("image", "phantom:random:1"),
        ("side", "64"),
        ("count", "10000"),
        ("noise_pct", "10"),
        ("f1", "5"),
        ("f2", "5"),
        ("f", "7.5"),
    ] {
        cfg.set(k, v)?;
    }
    cfg.out = "pipeline-out".into();
    for arg in std::env::args().skip(1) {
        let (k, v) =
            arg.split_once('=').ok_or_else(|| untomo::Error::InvalidArgument(format!("`{arg}` is not key=value")))?;
        cfg.set(k, v)?;
    }
    cfg.validate()?;

    let outs = run_stages(&cfg, Stage::Evaluate)?;
    for t in &outs.timings {
        println!("{:<11} {:6.1}s{}", t.stage.name(), t.seconds, if t.cached { " cached" } else { "" });
    }
    let r = outs.report.expect("evaluate writes a report");
    println!("rmse {:.4}", r.rmse);
    println!(
        "median angle error {:.2} -> {:.2} deg",
        r.init_angle_error.to_degrees(),
        r.refined_angle_error.to_degrees()
    );
    println!("artifacts in {}", cfg.out.display());
    Ok(())
}
