mod common;

use common::*;
use untomo::synth::{generate_dataset, AngleDistribution, CorruptionConfig};
use untomo::{OutlierClass, RngSeed};

#[test]
fn noise_level_matches_the_requested_percentage() {
    let img = phantom(64, 3);
    let dist = AngleDistribution::uniform();
    let noisy_cfg = CorruptionConfig { noise_pct: 50.0, max_shift: 1.5, ..CorruptionConfig::default() };
    let clean_cfg = CorruptionConfig { noise_pct: 0.0, ..noisy_cfg.clone() };
    let noisy = generate_dataset(&img, 2000, &dist, &noisy_cfg, RngSeed(11)).unwrap();
    let clean = generate_dataset(&img, 2000, &dist, &clean_cfg, RngSeed(11)).unwrap();

    let mut n = 0.0;
    let mut sum = 0.0;
    let mut sq = 0.0;
    let mut clean_sum = 0.0;
    for (a, b) in noisy.projections().iter().zip(clean.projections()) {
        for (x, y) in a.bins().iter().zip(b.bins()) {
            let d = x - y;
            sum += d;
            sq += d * d;
            clean_sum += y;
            n += 1.0;
        }
    }
    let sd = (sq / n - (sum / n).powi(2)).sqrt();
    let target = 0.5 * clean_sum / n;
    assert!((sd / target - 1.0).abs() < 0.02, "noise sd {sd} vs {target}");
    let recorded = noisy.noise_sigma().unwrap();
    assert!((recorded / target - 1.0).abs() < 1e-3, "recorded sigma {recorded} vs {target}");
}

#[test]
fn noiseless_dataset_is_the_shifted_forward_projection() {
    let img = phantom(48, 4);
    let cfg = CorruptionConfig { max_shift: 2.0, ..CorruptionConfig::default() };
    let set = generate_dataset(&img, 50, &AngleDistribution::four_segment(), &cfg, RngSeed(2)).unwrap();
    for (p, q) in set.projections().iter().zip(dataset_clean(&img, &set)) {
        for (a, b) in p.bins().iter().zip(q.bins()) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}

#[test]
fn outlier_labels_have_exact_counts() {
    let img = phantom(32, 5);
    let aliens: Vec<_> = (0..4).map(|s| phantom(32, 100 + s)).collect();
    let cfg = CorruptionConfig { f1_pct: 10.0, f2_pct: 7.0, alien_images: aliens, ..CorruptionConfig::default() };
    let set = generate_dataset(&img, 1000, &AngleDistribution::uniform(), &cfg, RngSeed(8)).unwrap();
    let truth = set.truth().unwrap();
    let count = |c| truth.iter().filter(|t| t.outlier_class == c).count();
    assert_eq!(count(OutlierClass::Class1), 100);
    assert_eq!(count(OutlierClass::Class2), 70);
    assert_eq!(count(OutlierClass::None), 830);
}

#[test]
fn same_seed_gives_identical_datasets() {
    let img = phantom(32, 6);
    let cfg = CorruptionConfig { noise_pct: 20.0, max_shift: 1.0, ..CorruptionConfig::default() };
    let a = generate_dataset(&img, 200, &AngleDistribution::uniform(), &cfg, RngSeed(9)).unwrap();
    let b = generate_dataset(&img, 200, &AngleDistribution::uniform(), &cfg, RngSeed(9)).unwrap();
    let c = generate_dataset(&img, 200, &AngleDistribution::uniform(), &cfg, RngSeed(10)).unwrap();
    assert_eq!(a, b);
    assert_ne!(a, c);
}
