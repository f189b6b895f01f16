//! Register a rotated, mirrored and translated copy back onto the original.

use untomo::metrics::{apply_registration, register_and_rmse, relative_rmse, transform_image};
use untomo::phantom::random_phantom;
use untomo::radon::disk_mask;
use untomo::RngSeed;

fn main() -> untomo::Result<()> {
    let img = disk_mask(&random_phantom(64, RngSeed(41)));
    let moved = transform_image(&img, 1.1, true, (1.5, -0.5));
    println!("unregistered rmse {:.4}", relative_rmse(&img, &moved)?);
    let reg = register_and_rmse(&img, &moved)?;
    println!(
        "rotation {:.2} deg, reflected {}, translation ({:.1}, {:.1}), rmse {:.4}",
        reg.rotation.to_degrees(),
        reg.reflected,
        reg.translation.0,
        reg.translation.1,
        reg.rmse
    );
    let aligned = apply_registration(&moved, &reg);
    println!("check {:.4}", relative_rmse(&img, &aligned)?);
    Ok(())
}
