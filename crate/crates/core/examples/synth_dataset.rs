//! Simulate a corrupted projection set and save it with its ground truth.

use std::path::Path;

use untomo::phantom::random_phantom;
use untomo::synth::{generate_dataset, AngleDistribution, CorruptionConfig};
use untomo::{io, OutlierClass, RngSeed};

fn main() -> untomo::Result<()> {
    let side = 64;
    let object = random_phantom(side, RngSeed(7));
    let aliens = (0..10).map(|i| random_phantom(side, RngSeed(1000 + i))).collect();
    let corrupt = CorruptionConfig {
        noise_pct: 20.0,
        f1_pct: 5.0,
        f2_pct: 5.0,
        max_shift: 2.0,
        alien_images: aliens,
        ..CorruptionConfig::default()
    };
    let set = generate_dataset(&object, 2000, &AngleDistribution::four_segment(), &corrupt, RngSeed(1))?;
    let truth = set.truth().expect("generated sets carry truth");
    let outliers = truth.iter().filter(|t| t.outlier_class != OutlierClass::None).count();
    println!(
        "{} projections of {} bins, {outliers} outliers, noise sd {:.3}",
        set.len(),
        set.bins(),
        set.noise_sigma().unwrap_or(0.0)
    );
    io::save_dataset(Path::new("dataset"), &set)
}
