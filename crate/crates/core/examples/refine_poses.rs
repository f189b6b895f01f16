//! Alternate image and pose updates starting from perturbed poses.

use std::f64::consts::PI;

use rand::Rng;
use untomo::metrics::{angle_errors, register_and_rmse};
use untomo::phantom::random_phantom;
use untomo::radon::{disk_mask, forward_project};
use untomo::refine::{refine, PoseGrid, RefineConfig};
use untomo::{canonicalize_angle, Pose, RngSeed};

fn main() -> untomo::Result<()> {
    let img = disk_mask(&random_phantom(64, RngSeed(21)));
    let mut rng = RngSeed(22).rng();
    let angles: Vec<f64> = (0..150).map(|i| i as f64 * PI / 150.0).collect();
    let projections: Vec<_> = angles.iter().map(|&a| forward_project(&img, a)).collect();
    let init = angles
        .iter()
        .map(|&a| Pose::new(canonicalize_angle(a + rng.gen_range(-0.1..0.1))?, 0.0))
        .collect::<untomo::Result<Vec<_>>>()?;

    let cfg = RefineConfig {
        outer_iters: 10,
        grid: PoseGrid { max_shift: 0.0, ..PoseGrid::default() },
        ..Default::default()
    };
    let r = refine(&projections, &init, &cfg)?;
    let est: Vec<f64> = r.poses.iter().map(|p| p.angle).collect();
    let start: Vec<f64> = init.iter().map(|p| p.angle).collect();
    println!(
        "median angle error {:.2} -> {:.2} deg",
        angle_errors(&start, &angles)?.median().to_degrees(),
        angle_errors(&est, &angles)?.median().to_degrees()
    );
    println!("objective {:?}", r.objective_trace.iter().map(|v| format!("{v:.1}")).collect::<Vec<_>>());
    println!("registered rmse {:.4}", register_and_rmse(&img, &r.image)?.rmse);
    Ok(())
}
