//! Project a phantom at known angles and reconstruct it by filtered backprojection.

use std::f64::consts::PI;

use untomo::metrics::relative_rmse;
use untomo::phantom::shepp_logan;
use untomo::radon::{disk_mask, fbp_reconstruct, forward_project, FbpFilter};
use untomo::{io, Pose};

fn main() -> untomo::Result<()> {
    let img = disk_mask(&shepp_logan(100));
    let poses: Vec<Pose> = (0..180).map(|i| Pose::new(i as f64 * PI / 180.0, 0.0)).collect::<Result<_, _>>()?;
    let projections: Vec<_> = poses.iter().map(|p| forward_project(&img, p.angle)).collect();
    let recon = fbp_reconstruct(&projections, &poses, &FbpFilter::default(), 100)?;
    println!("relative rmse {:.4}", relative_rmse(&img, &recon)?);
    io::write_pgm(std::path::Path::new("fbp.pgm"), &recon)
}
