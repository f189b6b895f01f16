//! Denoise noisy projections with patch PCA and compare against the clean ones.

use untomo::denoise::{denoise_projection, DenoiseConfig};
use untomo::phantom::random_phantom;
use untomo::synth::{generate_dataset, AngleDistribution, CorruptionConfig};
use untomo::{Projection, RngSeed};

fn mse(a: &Projection, b: &Projection) -> f64 {
    a.bins().iter().zip(b.bins()).map(|(x, y)| (x - y).powi(2)).sum::<f64>() / a.len() as f64
}

fn main() -> untomo::Result<()> {
    let object = random_phantom(100, RngSeed(5));
    let dist = AngleDistribution::uniform();
    let noisy_cfg = CorruptionConfig { noise_pct: 30.0, ..Default::default() };
    let noisy = generate_dataset(&object, 20, &dist, &noisy_cfg, RngSeed(9))?;
    let clean = generate_dataset(&object, 20, &dist, &CorruptionConfig::default(), RngSeed(9))?;
    let cfg = DenoiseConfig { noise_sd: noisy.noise_sigma().unwrap_or(0.0), ..DenoiseConfig::default() };

    let (mut before, mut after) = (0.0, 0.0);
    for (q, c) in noisy.projections().iter().zip(clean.projections()) {
        before += mse(q, c);
        after += mse(&denoise_projection(q, &cfg)?, c);
    }
    println!("mean squared error {:.3} -> {:.3}", before / 20.0, after / 20.0);
    Ok(())
}
