//! Estimate angles and shifts from moment consistency alone.

use std::f64::consts::PI;

use rand::Rng;
use untomo::hlcc::{solve, HlccConfig};
use untomo::metrics::{angle_errors, shift_errors};
use untomo::phantom::random_phantom;
use untomo::radon::{disk_mask, forward_project, shift_projection};
use untomo::RngSeed;

fn main() -> untomo::Result<()> {
    let img = disk_mask(&random_phantom(64, RngSeed(11)));
    let mut rng = RngSeed(12).rng();
    let angles: Vec<f64> = (0..200).map(|_| rng.gen_range(0.0..PI)).collect();
    let shifts: Vec<f64> = (0..200).map(|_| rng.gen_range(-2.0..2.0)).collect();
    let projections = angles
        .iter()
        .zip(&shifts)
        .map(|(&a, &s)| shift_projection(&forward_project(&img, a), s))
        .collect::<untomo::Result<Vec<_>>>()?;

    let cfg = HlccConfig { max_shift: 2.0, ..HlccConfig::default() };
    let sol = solve(&projections, &cfg, RngSeed(13))?;
    let est: Vec<f64> = sol.poses.iter().map(|p| p.angle).collect();
    println!("energy {:.3e} after {} restarts", sol.energy, sol.restarts_used);
    println!("median angle error {:.2} deg", angle_errors(&est, &angles)?.median().to_degrees());
    println!("mean shift error {:.3} bins", shift_errors(&sol.poses, &shifts)?.mean());
    Ok(())
}
