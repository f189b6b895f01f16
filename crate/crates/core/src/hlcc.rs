//! Pose initialization from the Helgason–Ludwig consistency conditions.
//!
//! The n-th moment of a projection at angle θ is a homogeneous polynomial of
//! degree n in `(cos θ, sin θ)` whose coefficients are the order-n geometric
//! moments of the image. Poses and image moments are fitted jointly by
//! coordinate descent on the squared residual of these relations, from several
//! random starts.
//!
//! Detector and image coordinates are centered and divided by `(L - 1) / 2`, so
//! powers up to the default order stay of order one.

use std::f64::consts::PI;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::radon::shift_projection;
use crate::types::{center, Image, Pose, Projection, RngSeed};

pub const DEFAULT_ORDER: usize = 7;
pub const DEFAULT_RESTARTS: usize = 10;

/// Index of `v_{n-j, j}` in the triangular layout.
fn tri(n: usize, j: usize) -> usize {
    n * (n + 1) / 2 + j
}

fn tri_len(k: usize) -> usize {
    (k + 1) * (k + 2) / 2
}

/// Length unit of the normalized moment coordinates for `len` bins.
pub fn moment_scale(len: usize) -> f64 {
    if len > 1 {
        (len as f64 - 1.0) / 2.0
    } else {
        1.0
    }
}

/// Geometric moments `v_{p,q}` of an image for `p + q <= k`.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageMoments {
    k: usize,
    v: Vec<f64>,
}

impl ImageMoments {
    pub fn zeros(k: usize) -> Self {
        ImageMoments { k, v: vec![0.0; tri_len(k)] }
    }

    /// Builds moments from `v_{n-j, j}` listed order by order.
    pub fn from_triangular(k: usize, v: Vec<f64>) -> Result<Self> {
        if v.len() != tri_len(k) {
            return Err(Error::invalid(format!("order {k} needs {} moments, got {}", tri_len(k), v.len())));
        }
        if v.iter().any(|x| !x.is_finite()) {
            return Err(Error::invalid("moments must be finite"));
        }
        Ok(ImageMoments { k, v })
    }

    pub fn from_image(img: &Image, k: usize) -> Self {
        let side = img.side();
        let c = center(side);
        let h = moment_scale(side);
        let powers = |t: f64| {
            let mut p = vec![1.0; k + 1];
            for n in 1..=k {
                p[n] = p[n - 1] * t;
            }
            p
        };
        let xp: Vec<Vec<f64>> = (0..side).map(|col| powers((col as f64 - c) / h)).collect();
        let mut v = vec![0.0; tri_len(k)];
        for row in 0..side {
            let yp = powers((row as f64 - c) / h);
            for (col, x) in xp.iter().enumerate() {
                let w = img.get(row, col);
                if w == 0.0 {
                    continue;
                }
                for n in 0..=k {
                    for j in 0..=n {
                        v[tri(n, j)] += w * x[n - j] * yp[j];
                    }
                }
            }
        }
        ImageMoments { k, v }
    }

    pub fn order(&self) -> usize {
        self.k
    }

    /// `v_{p,q}`. Panics if `p + q` exceeds the order.
    pub fn get(&self, p: usize, q: usize) -> f64 {
        assert!(p + q <= self.k, "moment ({p}, {q}) beyond order {}", self.k);
        self.v[tri(p + q, q)]
    }

    /// `[v_{n,0}, v_{n-1,1}, .., v_{0,n}]`.
    pub fn of_order(&self, n: usize) -> &[f64] {
        &self.v[tri(n, 0)..tri(n, 0) + n + 1]
    }

    pub fn as_triangular(&self) -> &[f64] {
        &self.v
    }
}

/// Moments `m[n] = Σ q(ρ) ρⁿ` of one projection over normalized detector coordinates.
#[derive(Clone, Debug, PartialEq)]
pub struct ProjectionMoments {
    m: Vec<f64>,
}

impl ProjectionMoments {
    pub fn values(&self) -> &[f64] {
        &self.m
    }

    pub fn order(&self) -> usize {
        self.m.len() - 1
    }
}

fn raw_moments(bins: &[f64], offset: isize, k: usize, out: &mut [f64]) {
    let len = bins.len() as isize;
    let c = center(bins.len());
    let h = moment_scale(bins.len());
    out.iter_mut().for_each(|o| *o = 0.0);
    for (j, &q) in bins.iter().enumerate() {
        let i = j as isize + offset;
        if q == 0.0 || i < 0 || i >= len {
            continue;
        }
        let r = (i as f64 - c) / h;
        let mut p = q;
        for o in out.iter_mut().take(k + 1) {
            *o += p;
            p *= r;
        }
    }
}

/// Moments of `p` after undoing a detector shift of `reverse_shift` bins.
pub fn projection_moments(p: &Projection, reverse_shift: f64, k: usize) -> Result<ProjectionMoments> {
    let shifted = shift_projection(p, -reverse_shift)?;
    let mut m = vec![0.0; k + 1];
    raw_moments(shifted.bins(), 0, k, &mut m);
    Ok(ProjectionMoments { m })
}

/// `[C(n,j) cos^{n-j}θ sin^jθ for j = 0..=n]`.
pub fn hlcc_coefficients(angle: f64, n: usize) -> Vec<f64> {
    let (s, c) = angle.sin_cos();
    let mut out = Vec::with_capacity(n + 1);
    let mut binom = 1.0;
    for j in 0..=n {
        out.push(binom * c.powi((n - j) as i32) * s.powi(j as i32));
        binom = binom * (n - j) as f64 / (j + 1) as f64;
    }
    out
}

/// Predicted n-th projection moment at `angle`.
pub fn hlcc_predict(moments: &ImageMoments, angle: f64, n: usize) -> Result<f64> {
    if n > moments.k {
        return Err(Error::invalid(format!("order {n} exceeds moment order {}", moments.k)));
    }
    Ok(hlcc_coefficients(angle, n).iter().zip(moments.of_order(n)).map(|(a, v)| a * v).sum())
}

/// All predicted moments up to the moment order, written to `out`.
fn predict_all(moments: &ImageMoments, angle: f64, out: &mut [f64]) {
    let (s, c) = angle.sin_cos();
    let k = moments.k;
    let mut cp = [1.0; 32];
    let mut sp = [1.0; 32];
    for n in 1..=k {
        cp[n] = cp[n - 1] * c;
        sp[n] = sp[n - 1] * s;
    }
    for (n, o) in out.iter_mut().enumerate().take(k + 1) {
        let v = moments.of_order(n);
        let mut binom = 1.0;
        let mut acc = 0.0;
        for j in 0..=n {
            acc += binom * cp[n - j] * sp[j] * v[j];
            binom = binom * (n - j) as f64 / (j + 1) as f64;
        }
        *o = acc;
    }
}

/// Squared residual of the consistency conditions up to order `k`, with each
/// projection's moments taken after undoing its pose shift.
pub fn energy(poses: &[Pose], moments: &ImageMoments, projections: &[Projection], k: usize) -> Result<f64> {
    if poses.len() != projections.len() {
        return Err(Error::invalid(format!("{} poses for {} projections", poses.len(), projections.len())));
    }
    if k > moments.k {
        return Err(Error::invalid(format!("order {k} exceeds moment order {}", moments.k)));
    }
    let mut pred = vec![0.0; moments.k + 1];
    let mut total = 0.0;
    for (pose, p) in poses.iter().zip(projections) {
        let m = projection_moments(p, pose.shift, k)?;
        predict_all(moments, pose.angle, &mut pred);
        total += m.m.iter().zip(&pred).map(|(a, b)| (a - b).powi(2)).sum::<f64>();
    }
    Ok(total)
}

/// Least-squares image moments for fixed poses, solved order by order.
pub fn fit_image_moments(poses: &[Pose], projections: &[Projection], k: usize) -> Result<ImageMoments> {
    if poses.len() != projections.len() {
        return Err(Error::invalid("poses and projections differ in length"));
    }
    let data = poses
        .iter()
        .zip(projections)
        .map(|(pose, p)| projection_moments(p, pose.shift, k).map(|m| m.m))
        .collect::<Result<Vec<_>>>()?;
    let angles: Vec<f64> = poses.iter().map(|p| p.angle).collect();
    Ok(fit_from_data(&angles, &data, k))
}

fn fit_from_data(angles: &[f64], data: &[Vec<f64>], k: usize) -> ImageMoments {
    let rows = angles.len();
    let mut v = vec![0.0; tri_len(k)];
    for n in 0..=k {
        let a = DMatrix::<f64>::from_fn(rows, n + 1, |i, j| {
            let (s, c) = angles[i].sin_cos();
            binomial(n, j) * c.powi((n - j) as i32) * s.powi(j as i32)
        });
        let b = DVector::<f64>::from_fn(rows, |i, _| data[i][n]);
        let svd = a.svd(true, true);
        let smax = svd.singular_values.max();
        let eps = smax * 1e-12 * rows.max(n + 1) as f64;
        let x = svd.solve(&b, eps).expect("u and v were computed");
        v[tri(n, 0)..=tri(n, n)].copy_from_slice(x.as_slice());
    }
    ImageMoments { k, v }
}

fn binomial(n: usize, j: usize) -> f64 {
    (0..j).fold(1.0, |acc, i| acc * (n - i) as f64 / (i + 1) as f64)
}

/// Projection moments at integer detector offsets, blended linearly to match
/// [`projection_moments`] for any fractional reverse shift.
struct MomentTable {
    k: usize,
    lo: isize,
    rows: Vec<Vec<f64>>,
}

impl MomentTable {
    fn new(bins: &[f64], k: usize, max_shift: f64) -> Self {
        let lo = (-max_shift).floor() as isize;
        let hi = max_shift.floor() as isize + 1;
        let rows = (lo..=hi)
            .map(|t| {
                let mut m = vec![0.0; k + 1];
                raw_moments(bins, t, k, &mut m);
                m
            })
            .collect();
        MomentTable { k, lo, rows }
    }

    fn at(&self, reverse_shift: f64, out: &mut [f64]) {
        let t = -reverse_shift;
        let fl = t.floor();
        let f = t - fl;
        let r = (fl as isize - self.lo) as usize;
        let a = &self.rows[r];
        if f == 0.0 {
            out[..=self.k].copy_from_slice(a);
            return;
        }
        let b = &self.rows[r + 1];
        for n in 0..=self.k {
            out[n] = (1.0 - f) * a[n] + f * b[n];
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct HlccConfig {
    pub order: usize,
    pub restarts: usize,
    /// Shifts are searched in `[-max_shift, max_shift]` bins.
    pub max_shift: f64,
    pub max_sweeps: usize,
    /// Relative energy decrease per sweep below which a restart stops.
    pub tolerance: f64,
    /// Coarse angle grid spacing in radians.
    pub angle_step: f64,
    /// Coarse shift grid spacing in bins.
    pub shift_step: f64,
}

impl Default for HlccConfig {
    fn default() -> Self {
        HlccConfig {
            order: DEFAULT_ORDER,
            restarts: DEFAULT_RESTARTS,
            max_shift: 2.0,
            max_sweeps: 200,
            tolerance: 1e-9,
            angle_step: 1f64.to_radians(),
            shift_step: 0.25,
        }
    }
}

impl HlccConfig {
    pub fn validate(&self, count: usize, len: usize) -> Result<()> {
        if self.order < 1 || self.order > 20 {
            return Err(Error::invalid(format!("moment order {} must lie in [1, 20]", self.order)));
        }
        if self.restarts < 1 {
            return Err(Error::invalid("restarts must be >= 1"));
        }
        if count < self.order + 1 {
            return Err(Error::invalid(format!(
                "{count} projections cannot determine moments up to order {}; need at least {}",
                self.order,
                self.order + 1
            )));
        }
        let bound = len as f64 / 4.0;
        if !(self.max_shift.is_finite() && self.max_shift >= 0.0 && self.max_shift <= bound) {
            return Err(Error::invalid(format!("max_shift {} must lie in [0, {bound}]", self.max_shift)));
        }
        if !(self.tolerance >= 0.0 && self.angle_step > 0.0 && self.shift_step > 0.0) {
            return Err(Error::invalid("tolerance and grid steps must be positive"));
        }
        if self.max_sweeps == 0 {
            return Err(Error::invalid("max_sweeps must be >= 1"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct HlccSolution {
    pub poses: Vec<Pose>,
    pub moments: ImageMoments,
    /// Energy at the returned poses and moments.
    pub energy: f64,
    pub restarts_used: usize,
    /// Final energy of every restart, in restart order.
    pub restart_energies: Vec<f64>,
    /// Energy after every block update of the winning restart.
    pub trace: Vec<f64>,
}

pub fn solve(projections: &[Projection], cfg: &HlccConfig, seed: RngSeed) -> Result<HlccSolution> {
    let len = projections.first().map(|p| p.len()).unwrap_or(0);
    cfg.validate(projections.len(), len)?;
    if projections.iter().any(|p| p.len() != len) {
        return Err(Error::invalid("projections differ in length"));
    }
    let k = cfg.order;
    let tables: Vec<MomentTable> = projections.iter().map(|p| MomentTable::new(p.bins(), k, cfg.max_shift)).collect();
    let runs: Vec<Restart> =
        (0..cfg.restarts).into_par_iter().map(|r| run_restart(&tables, cfg, seed.derive(r as u64))).collect();

    let mut best = 0;
    for (i, run) in runs.iter().enumerate() {
        if run.energy < runs[best].energy {
            best = i;
        }
    }
    let restart_energies = runs.iter().map(|r| r.energy).collect();
    let run = runs.into_iter().nth(best).expect("at least one restart");
    let poses = run.angles.iter().zip(&run.shifts).map(|(&a, &s)| Pose::new(a, s)).collect::<Result<Vec<_>>>()?;
    let exact = energy(&poses, &run.moments, projections, k)?;
    Ok(HlccSolution {
        poses,
        moments: run.moments,
        energy: exact,
        restarts_used: cfg.restarts,
        restart_energies,
        trace: run.trace,
    })
}

struct Restart {
    angles: Vec<f64>,
    shifts: Vec<f64>,
    moments: ImageMoments,
    energy: f64,
    trace: Vec<f64>,
}

fn run_restart(tables: &[MomentTable], cfg: &HlccConfig, seed: RngSeed) -> Restart {
    let count = tables.len();
    let mut rng = seed.rng();
    let angles: Vec<f64> = (0..count).map(|_| rng.gen_range(0.0..PI)).collect();
    let shifts: Vec<f64> = (0..count)
        .map(|_| if cfg.max_shift > 0.0 { rng.gen_range(-cfg.max_shift..=cfg.max_shift) } else { 0.0 })
        .collect();
    descend(tables, cfg, cfg.order, angles, shifts)
}

/// Coordinate descent on the energy truncated at order `k` from the given
/// poses.
fn descend(tables: &[MomentTable], cfg: &HlccConfig, k: usize, mut angles: Vec<f64>, mut shifts: Vec<f64>) -> Restart {
    let count = tables.len();
    let data_at = |shifts: &[f64]| -> Vec<Vec<f64>> {
        tables
            .iter()
            .zip(shifts)
            .map(|(t, &s)| {
                let mut m = vec![0.0; t.k + 1];
                t.at(s, &mut m);
                m.truncate(k + 1);
                m
            })
            .collect()
    };
    let total = |angles: &[f64], data: &[Vec<f64>], v: &ImageMoments| -> f64 {
        let mut pred = vec![0.0; k + 1];
        let mut e = 0.0;
        for (a, m) in angles.iter().zip(data) {
            predict_all(v, *a, &mut pred);
            e += m.iter().zip(&pred).map(|(x, y)| (x - y).powi(2)).sum::<f64>();
        }
        e
    };

    let grid_angles: Vec<f64> = (0..).map(|i| i as f64 * cfg.angle_step).take_while(|&a| a < PI).collect();
    let grid_shifts = shift_grid(cfg.max_shift, cfg.shift_step);

    let mut moments = ImageMoments::zeros(k);
    let mut data = data_at(&shifts);
    let mut e = total(&angles, &data, &moments);
    let mut trace = vec![e];
    for _ in 0..cfg.max_sweeps {
        let start = e;

        let fitted = fit_from_data(&angles, &data, k);
        let e_fit = total(&angles, &data, &fitted);
        if e_fit <= e {
            moments = fitted;
            e = e_fit;
        }
        trace.push(e);

        let grid_pred: Vec<Vec<f64>> = grid_angles
            .iter()
            .map(|&a| {
                let mut p = vec![0.0; k + 1];
                predict_all(&moments, a, &mut p);
                p
            })
            .collect();
        let ctx = PoseSearch {
            order: k,
            moments: &moments,
            grid_angles: &grid_angles,
            grid_pred: &grid_pred,
            grid_shifts: &grid_shifts,
            cfg,
        };
        let updated: Vec<(f64, f64, f64)> =
            (0..count).into_par_iter().map(|i| ctx.update(&tables[i], angles[i], shifts[i])).collect();
        for (i, (a, s, _)) in updated.iter().enumerate() {
            angles[i] = *a;
            shifts[i] = *s;
        }
        data = data_at(&shifts);
        let e_pose: f64 = updated.iter().map(|u| u.2).sum();
        e = e_pose.min(e);
        trace.push(e);

        if start - e <= cfg.tolerance * start {
            break;
        }
    }
    Restart { angles, shifts, moments, energy: e, trace }
}

pub(crate) fn shift_grid(max_shift: f64, step: f64) -> Vec<f64> {
    if max_shift == 0.0 {
        return vec![0.0];
    }
    let n = (2.0 * max_shift / step + 1e-9).floor() as usize;
    let mut g: Vec<f64> = (0..=n).map(|i| -max_shift + i as f64 * step).collect();
    if (g[n] - max_shift).abs() > 1e-12 {
        g.push(max_shift);
    }
    g
}

struct PoseSearch<'a> {
    order: usize,
    moments: &'a ImageMoments,
    grid_angles: &'a [f64],
    grid_pred: &'a [Vec<f64>],
    grid_shifts: &'a [f64],
    cfg: &'a HlccConfig,
}

const GOLDEN_ITERS: usize = 40;

impl PoseSearch<'_> {
    /// Returns the updated angle, shift and this projection's energy term.
    ///
    /// The coarse grid is searched jointly over angle and shift; golden-section
    /// refinement then runs on the angle and on the shift in turn. Every
    /// candidate is accepted only if it lowers the residual.
    fn update(&self, table: &MomentTable, angle: f64, shift: f64) -> (f64, f64, f64) {
        let mut m = vec![0.0; table.k + 1];
        let mut pred = vec![0.0; self.order + 1];
        let resid = |m: &[f64], p: &[f64]| m.iter().zip(p).map(|(a, b)| (a - b).powi(2)).sum::<f64>();

        table.at(shift, &mut m);
        predict_all(self.moments, angle, &mut pred);
        let (mut angle, mut shift) = (angle, shift);
        let mut f = resid(&m, &pred);

        // joint coarse grid
        let (mut ga, mut gs, mut fg) = (angle, shift, f);
        for &s in self.grid_shifts {
            table.at(s, &mut m);
            for (a, p) in self.grid_angles.iter().zip(self.grid_pred) {
                let r = resid(&m, p);
                if r < fg {
                    ga = *a;
                    gs = s;
                    fg = r;
                }
            }
        }
        if fg < f {
            angle = ga;
            shift = gs;
            f = fg;
        }

        // angle refinement
        table.at(shift, &mut m);
        let lo = (angle - self.cfg.angle_step).max(0.0);
        let hi = (angle + self.cfg.angle_step).min(PI - 1e-12);
        let (a, fa) = golden_min(lo, hi, GOLDEN_ITERS, |a| {
            predict_all(self.moments, a, &mut pred);
            resid(&m, &pred)
        });
        if fa < f {
            angle = a;
            f = fa;
        }

        // shift refinement
        if self.cfg.max_shift > 0.0 {
            predict_all(self.moments, angle, &mut pred);
            let lo = (shift - self.cfg.shift_step).max(-self.cfg.max_shift);
            let hi = (shift + self.cfg.shift_step).min(self.cfg.max_shift);
            let (s, fs) = golden_min(lo, hi, GOLDEN_ITERS, |s| {
                table.at(s, &mut m);
                resid(&m, &pred)
            });
            if fs < f {
                shift = s;
                f = fs;
            }
        }
        (angle, shift, f)
    }
}

/// Golden-section search for a minimum of `f` on `[lo, hi]`.
pub(crate) fn golden_min(mut lo: f64, mut hi: f64, iters: usize, mut f: impl FnMut(f64) -> f64) -> (f64, f64) {
    const INV_PHI: f64 = 0.618_033_988_749_894_8;
    let mut x1 = hi - INV_PHI * (hi - lo);
    let mut x2 = lo + INV_PHI * (hi - lo);
    let mut f1 = f(x1);
    let mut f2 = f(x2);
    for _ in 0..iters {
        if f1 <= f2 {
            hi = x2;
            x2 = x1;
            f2 = f1;
            x1 = hi - INV_PHI * (hi - lo);
            f1 = f(x1);
        } else {
            lo = x1;
            x1 = x2;
            f1 = f2;
            x2 = lo + INV_PHI * (hi - lo);
            f2 = f(x2);
        }
    }
    if f1 <= f2 {
        (x1, f1)
    } else {
        (x2, f2)
    }
}
