//! Cluster noisy projections with median centroids and discard the farthest ones.

use untomo::cluster::{average_clusters, remove_class1, robust_kmeans};
use untomo::phantom::random_phantom;
use untomo::synth::{generate_dataset, AngleDistribution, CorruptionConfig};
use untomo::{OutlierClass, RngSeed};

fn main() -> untomo::Result<()> {
    let side = 48;
    let object = random_phantom(side, RngSeed(3));
    let aliens = (0..20).map(|i| random_phantom(side, RngSeed(500 + i))).collect();
    let corrupt =
        CorruptionConfig { noise_pct: 10.0, f1_pct: 10.0, f2_pct: 10.0, alien_images: aliens, ..Default::default() };
    let set = generate_dataset(&object, 3000, &AngleDistribution::uniform(), &corrupt, RngSeed(2))?;

    let c = robust_kmeans(&set, 30, 1.0, 50, RngSeed(4))?;
    let c = remove_class1(&set, &c, 15.0)?;
    let truth = set.truth().expect("truth");
    let class1 = truth.iter().filter(|t| t.outlier_class == OutlierClass::Class1).count();
    let caught = truth
        .iter()
        .zip(&c.assignments)
        .filter(|(t, a)| t.outlier_class == OutlierClass::Class1 && a.is_discarded())
        .count();
    println!("discarded {} projections, class-1 recall {:.3}", c.discarded_count, caught as f64 / class1 as f64);
    println!("lloyd objective {:?}", c.objective_trace.iter().map(|v| v.round()).collect::<Vec<_>>());

    let avg = average_clusters(&set, &c)?;
    println!("{} cluster averages, sizes {:?}", avg.projections.len(), avg.member_counts);
    Ok(())
}
