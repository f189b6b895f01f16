//! Property checks shared by the property tests and the acceptance run.
#![allow(dead_code)]

use std::f64::consts::PI;

use rand::Rng;
use untomo::cluster::robust_kmeans;
use untomo::hlcc::{self, HlccConfig, ImageMoments};
use untomo::phantom::random_phantom;
use untomo::pipeline::{run_pipeline, PipelineConfig};
use untomo::radon::{backproject, disk_mask, forward_project, shift_projection};
use untomo::refine::{objective, objective_gradient, pose_step, PoseGrid};
use untomo::sparse::{sparse_reconstruct, Lambda, SparseConfig};
use untomo::synth::{generate_dataset, AngleDistribution, CorruptionConfig};
use untomo::{metrics, Image, Pose, Projection, ProjectionSet, RngSeed};

pub type Check = Result<(), String>;

pub fn ensure(ok: bool, msg: impl FnOnce() -> String) -> Check {
    if ok {
        Ok(())
    } else {
        Err(msg())
    }
}

pub fn phantom(side: usize, seed: u64) -> Image {
    disk_mask(&random_phantom(side, RngSeed(seed)))
}

pub fn random_image(side: usize, seed: u64) -> Image {
    let mut rng = RngSeed(seed).rng();
    let px = (0..side * side).map(|_| rng.gen_range(-1.0..1.0)).collect();
    disk_mask(&Image::new(side, px).unwrap())
}

pub fn uniform_angles(n: usize) -> Vec<f64> {
    (0..n).map(|i| i as f64 * PI / n as f64).collect()
}

/// Noiseless projections of `img` at the given angles, shifted by `shifts`.
pub fn project_all(img: &Image, angles: &[f64], shifts: &[f64]) -> Vec<Projection> {
    angles.iter().zip(shifts).map(|(&a, &s)| shift_projection(&forward_project(img, a), s).unwrap()).collect()
}

/// Projection moments agree with the moments predicted from the image.
/// Errors are relative to the image mass, which bounds every normalized
/// moment of a nonnegative image inside the unit disk.
pub fn hlcc_identity(seed: u64) -> Check {
    let k = 7;
    let img = phantom(100, seed);
    let moments = ImageMoments::from_image(&img, k);
    let mut rng = RngSeed(seed).derive(1).rng();
    for _ in 0..12 {
        let angle = rng.gen_range(0.0..PI);
        let pm = hlcc::projection_moments(&forward_project(&img, angle), 0.0, k).unwrap();
        for n in 0..=k {
            let pred = hlcc::hlcc_predict(&moments, angle, n).unwrap();
            let err = (pm.values()[n] - pred).abs() / img.mass();
            ensure(err <= 1e-3, || format!("order {n} at {angle:.3} rad: relative error {err:.2e}"))?;
        }
    }
    Ok(())
}

/// Every block update of the winning restart lowers the energy or keeps it.
pub fn hlcc_energy_monotone(seed: u64) -> Check {
    let img = phantom(48, seed);
    let mut rng = RngSeed(seed).derive(2).rng();
    let angles: Vec<f64> = (0..24).map(|_| rng.gen_range(0.0..PI)).collect();
    let shifts: Vec<f64> = (0..24).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let ps = project_all(&img, &angles, &shifts);
    let cfg = HlccConfig { order: 4, restarts: 2, max_shift: 1.0, max_sweeps: 20, ..HlccConfig::default() };
    let sol = hlcc::solve(&ps, &cfg, RngSeed(seed)).map_err(|e| e.to_string())?;
    for w in sol.trace.windows(2) {
        ensure(w[1] <= w[0] * (1.0 + 1e-12) + 1e-12, || format!("energy rose {} -> {}", w[0], w[1]))?;
    }
    ensure(!sol.trace.is_empty(), || "empty energy trace".into())
}

/// Lloyd iterations never raise the clustering objective.
pub fn kmeans_monotone(seed: u64) -> Check {
    let img = phantom(32, seed);
    let corrupt = CorruptionConfig { noise_pct: 30.0, ..CorruptionConfig::default() };
    let set = generate_dataset(&img, 300, &AngleDistribution::uniform(), &corrupt, RngSeed(seed)).unwrap();
    let c = robust_kmeans(&set, 12, 1.0, 30, RngSeed(seed)).map_err(|e| e.to_string())?;
    for w in c.objective_trace.windows(2) {
        ensure(w[1] <= w[0] * (1.0 + 1e-12), || format!("objective rose {} -> {}", w[0], w[1]))?;
    }
    Ok(())
}

/// A pose step never raises the objective, in total or per projection.
pub fn pose_step_monotone(seed: u64) -> Check {
    let truth = phantom(32, seed);
    let w = phantom(32, seed + 1000);
    let mut rng = RngSeed(seed).derive(3).rng();
    let angles: Vec<f64> = (0..20).map(|_| rng.gen_range(0.0..PI)).collect();
    let shifts: Vec<f64> = (0..20).map(|_| rng.gen_range(-1.5..1.5)).collect();
    let ps = project_all(&truth, &angles, &shifts);
    let poses: Vec<Pose> =
        (0..20).map(|_| Pose::new(rng.gen_range(0.0..PI), rng.gen_range(-1.0..1.0)).unwrap()).collect();
    let grid = PoseGrid { angle_step_deg: 3.0, shift_step: 0.5, max_shift: 2.0, ..PoseGrid::default() };
    let step = pose_step(&w, &ps, &poses, &grid).map_err(|e| e.to_string())?;
    ensure(step.change.after <= step.change.before, || format!("{:?}", step.change))?;
    for (i, q) in ps.iter().enumerate() {
        let before = objective(&w, std::slice::from_ref(q), &poses[i..=i]).unwrap();
        let after = objective(&w, std::slice::from_ref(q), &step.poses[i..=i]).unwrap();
        ensure(after <= before, || format!("projection {i}: {before} -> {after}"))?;
    }
    Ok(())
}

/// The shrinkage objective never rises within an inner loop.
pub fn beta_monotone(seed: u64) -> Check {
    let img = phantom(24, seed);
    let angles = uniform_angles(30);
    let ps = project_all(&img, &angles, &[0.0; 30]);
    let poses: Vec<Pose> = angles.iter().map(|&a| Pose::new(a, 0.0).unwrap()).collect();
    let cfg = SparseConfig {
        lambda1: Lambda::Relative(1e-2),
        inner_iters: 30,
        outer_iters: 2,
        grid: PoseGrid { angle_step_deg: 5.0, max_shift: 0.0, ..PoseGrid::default() },
        ..SparseConfig::default()
    };
    let r = sparse_reconstruct(&ps, &poses, &cfg).map_err(|e| e.to_string())?;
    for t in &r.beta_traces {
        for w in t.windows(2) {
            ensure(w[1] <= w[0] * (1.0 + 1e-12), || format!("β objective rose {} -> {}", w[0], w[1]))?;
        }
    }
    Ok(())
}

/// `⟨R a, b⟩ = ⟨a, Rᵀ b⟩` for the projector and backprojector.
pub fn radon_adjoint(seed: u64) -> Check {
    let side = 24;
    let a = random_image(side, seed);
    let mut rng = RngSeed(seed).derive(4).rng();
    let angles: Vec<f64> = (0..7).map(|_| rng.gen_range(0.0..PI)).collect();
    let bs: Vec<Projection> =
        (0..7).map(|_| Projection::new((0..side).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()).collect();
    let lhs: f64 = angles
        .iter()
        .zip(&bs)
        .map(|(&t, b)| forward_project(&a, t).bins().iter().zip(b.bins()).map(|(x, y)| x * y).sum::<f64>())
        .sum();
    let bt = backproject(&bs, &angles, side).unwrap();
    let rhs: f64 = a.pixels().iter().zip(bt.pixels()).map(|(x, y)| x * y).sum();
    let err = (lhs - rhs).abs() / lhs.abs().max(rhs.abs()).max(1.0);
    ensure(err <= 1e-6, || format!("adjoint mismatch {lhs} vs {rhs}"))
}

/// The analytic image gradient matches central differences.
pub fn refine_gradient(seed: u64) -> Check {
    let side = 16;
    let truth = phantom(side, seed);
    let w = random_image(side, seed + 7);
    let mut rng = RngSeed(seed).derive(5).rng();
    let angles: Vec<f64> = (0..6).map(|_| rng.gen_range(0.0..PI)).collect();
    let shifts: Vec<f64> = (0..6).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let ps = project_all(&truth, &angles, &shifts);
    let poses: Vec<Pose> = angles.iter().zip(&shifts).map(|(&a, &s)| Pose::new(a, s).unwrap()).collect();
    let g = objective_gradient(&w, &ps, &poses).map_err(|e| e.to_string())?;
    let h = 1e-5;
    let px = w.pixels().to_vec();
    let inside: Vec<usize> = (0..side * side).filter(|&i| w.pixels()[i] != 0.0).collect();
    for &i in inside.iter().step_by(5) {
        let eval = |d: f64| {
            let mut q = px.clone();
            q[i] += d;
            objective(&Image::new(side, q).unwrap(), &ps, &poses).unwrap()
        };
        let fd = (eval(h) - eval(-h)) / (2.0 * h);
        let an = g.pixels()[i];
        let err = (fd - an).abs() / fd.abs().max(an.abs()).max(1.0);
        ensure(err <= 1e-4, || format!("pixel {i}: analytic {an} vs difference {fd}"))?;
    }
    Ok(())
}

/// Registration removes a rotation, reflection and translation of the truth.
pub fn registration_gauge(seed: u64) -> Check {
    let img = phantom(64, seed);
    let mut rng = RngSeed(seed).derive(6).rng();
    let rot = rng.gen_range(0.0..2.0 * PI);
    let reflected = rng.gen_bool(0.5);
    let t = (rng.gen_range(-2.0..2.0), rng.gen_range(-2.0..2.0));
    let moved = metrics::transform_image(&img, rot, reflected, t);
    let r = metrics::register_and_rmse(&img, &moved).map_err(|e| e.to_string())?;
    ensure(r.rmse <= 0.1, || format!("registered rmse {} for rotation {rot:.3} reflected {reflected}", r.rmse))?;
    let again = metrics::register_and_rmse(&img, &metrics::apply_registration(&moved, &r)).unwrap();
    ensure((again.rmse - r.rmse).abs() <= 1e-3, || format!("re-registration moved rmse {} -> {}", r.rmse, again.rmse))?;

    let truth: Vec<f64> = (0..40).map(|_| rng.gen_range(0.0..PI)).collect();
    let est: Vec<f64> = truth.iter().map(|t| (t + rng.gen_range(-0.05..0.05)).rem_euclid(PI)).collect();
    let base = metrics::angle_errors(&est, &truth).unwrap();
    let offset: Vec<f64> = est.iter().map(|e| (e + 1.234).rem_euclid(PI)).collect();
    let moved = metrics::angle_errors(&offset, &truth).unwrap();
    for (a, b) in base.errors.iter().zip(&moved.errors) {
        ensure((a - b).abs() <= 0.1f64.to_radians(), || format!("offset changed an angle error {a} -> {b}"))?;
    }
    let twice = img.map(|v| 2.0 * v).unwrap();
    let lit = metrics::relative_rmse(&img, &twice).unwrap();
    ensure((lit - 1.0).abs() < 1e-12, || format!("rmse(w, 2w) = {lit}"))
}

fn tiny_run(dir: &std::path::Path, seed: u64) -> PipelineConfig {
    let mut cfg = PipelineConfig::default();
    for (k, v) in [
        ("image", format!("phantom:random:{seed}")),
        ("side", "32".into()),
        ("count", "1200".into()),
        ("noise_pct", "10".into()),
        ("f1", "5".into()),
        ("f2", "5".into()),
        ("f", "10".into()),
        ("k_c", "30".into()),
        ("aliens", "10".into()),
        ("restarts", "2".into()),
        ("outer_iters", "3".into()),
    ] {
        cfg.set(k, &v).unwrap();
    }
    cfg.seed = seed;
    cfg.out = dir.to_path_buf();
    cfg
}

/// The report does not depend on the number of worker threads.
pub fn worker_invariance(seed: u64) -> Check {
    let base = tempfile::tempdir().map_err(|e| e.to_string())?;
    let mut reports = Vec::new();
    for threads in [1, 3] {
        let cfg = tiny_run(&base.path().join(format!("w{threads}")), seed);
        let pool = rayon::ThreadPoolBuilder::new().num_threads(threads).build().map_err(|e| e.to_string())?;
        let report = pool.install(|| run_pipeline(&cfg)).map_err(|e| e.to_string())?;
        reports.push(report.to_pairs());
    }
    ensure(reports[0] == reports[1], || format!("1 thread: {:?}\n3 threads: {:?}", reports[0], reports[1]))
}

pub fn tiny_pipeline_config(dir: &std::path::Path, seed: u64) -> PipelineConfig {
    tiny_run(dir, seed)
}

/// Every property check at one seed, by name.
pub fn property_suite(seed: u64) -> Vec<(&'static str, Check)> {
    vec![
        ("moment identity", hlcc_identity(seed)),
        ("energy monotone", hlcc_energy_monotone(seed)),
        ("k-means monotone", kmeans_monotone(seed)),
        ("pose step monotone", pose_step_monotone(seed)),
        ("shrinkage monotone", beta_monotone(seed)),
        ("projector adjoint", radon_adjoint(seed)),
        ("image gradient", refine_gradient(seed)),
        ("registration gauge", registration_gauge(seed)),
        ("worker invariance", worker_invariance(seed)),
    ]
}

pub fn dataset_clean(img: &Image, set: &ProjectionSet) -> Vec<Projection> {
    let truth = set.truth().expect("truth");
    let angles: Vec<f64> = truth.iter().map(|t| t.angle).collect();
    let shifts: Vec<f64> = truth.iter().map(|t| t.shift).collect();
    project_all(img, &angles, &shifts)
}
