//! Compare the sparsity-regularized reconstruction with pose refinement.

use std::f64::consts::PI;

use rand::Rng;
use untomo::metrics::register_and_rmse;
use untomo::phantom::random_phantom;
use untomo::radon::{disk_mask, forward_project};
use untomo::refine::{refine, PoseGrid, RefineConfig};
use untomo::sparse::{sparse_reconstruct, SparseConfig};
use untomo::{canonicalize_angle, Pose, RngSeed};

fn main() -> untomo::Result<()> {
    let img = disk_mask(&random_phantom(48, RngSeed(31)));
    let mut rng = RngSeed(32).rng();
    let angles: Vec<f64> = (0..120).map(|_| rng.gen_range(0.0..PI)).collect();
    let projections: Vec<_> = angles.iter().map(|&a| forward_project(&img, a)).collect();
    let init = angles
        .iter()
        .map(|&a| Pose::new(canonicalize_angle(a + rng.gen_range(-0.15..0.15))?, 0.0))
        .collect::<untomo::Result<Vec<_>>>()?;
    let grid = PoseGrid { max_shift: 0.0, ..PoseGrid::default() };

    let sparse = sparse_reconstruct(&projections, &init, &SparseConfig { grid, ..Default::default() })?;
    let refined = refine(&projections, &init, &RefineConfig { grid, ..Default::default() })?;
    println!("lambda1 {:.3e}", sparse.lambda1);
    println!("sparse rmse {:.4}", register_and_rmse(&img, &sparse.image)?.rmse);
    println!("refine rmse {:.4}", register_and_rmse(&img, &refined.image)?.rmse);
    Ok(())
}
