//! Reconstruction and pose accuracy up to the unavoidable gauge freedoms.
//!
//! Images are compared after the rotation, reflection and translation that
//! best align the reconstruction with the truth. Angles are compared after
//! the best global offset and orientation, and shifts after removing the
//! image translation they absorb.

use std::f64::consts::{PI, TAU};

use nalgebra::{Matrix2, Vector2};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::types::{center, Image, Pose};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RegistrationResult {
    /// Rotation applied to the reconstruction, in `[0, 2π)`.
    pub rotation: f64,
    /// Whether the reconstruction is mirrored (`x -> -x`) before rotating.
    pub reflected: bool,
    /// Translation in pixels `(dx, dy)` applied after rotating.
    pub translation: (f64, f64),
    pub rmse: f64,
}

/// `‖truth − recon‖ / ‖truth‖` without any alignment.
pub fn relative_rmse(truth: &Image, recon: &Image) -> Result<f64> {
    check_pair(truth, recon)?;
    let num: f64 = truth.pixels().iter().zip(recon.pixels()).map(|(a, b)| (a - b).powi(2)).sum();
    Ok(num.sqrt() / truth.norm())
}

fn check_pair(truth: &Image, recon: &Image) -> Result<()> {
    if truth.side() != recon.side() {
        return Err(Error::invalid(format!("image sides differ: {} vs {}", truth.side(), recon.side())));
    }
    if truth.norm() == 0.0 {
        return Err(Error::invalid("relative error is undefined for an all-zero reference"));
    }
    Ok(())
}

fn transform_into(src: &[f64], side: usize, rotation: f64, reflected: bool, t: (f64, f64), out: &mut [f64]) {
    let c = center(side);
    let (s, co) = rotation.sin_cos();
    let n = side as isize;
    let at = |r: isize, q: isize| if r >= 0 && r < n && q >= 0 && q < n { src[(r * n + q) as usize] } else { 0.0 };
    for row in 0..side {
        let y = row as f64 - c - t.1;
        for col in 0..side {
            let x = col as f64 - c - t.0;
            let mut ux = co * x + s * y;
            let uy = -s * x + co * y;
            if reflected {
                ux = -ux;
            }
            let (fr, fc) = (uy + c, ux + c);
            let (r0, c0) = (fr.floor(), fc.floor());
            let (dy, dx) = (fr - r0, fc - c0);
            let (r0, c0) = (r0 as isize, c0 as isize);
            out[row * side + col] = (1.0 - dy) * ((1.0 - dx) * at(r0, c0) + dx * at(r0, c0 + 1))
                + dy * ((1.0 - dx) * at(r0 + 1, c0) + dx * at(r0 + 1, c0 + 1));
        }
    }
}

/// Mirrors (optionally), rotates by `rotation` and translates by `translation`
/// with bilinear interpolation and zero fill.
pub fn transform_image(img: &Image, rotation: f64, reflected: bool, translation: (f64, f64)) -> Image {
    let mut out = vec![0.0; img.pixels().len()];
    transform_into(img.pixels(), img.side(), rotation, reflected, translation, &mut out);
    Image::from_raw_unchecked(img.side(), out)
}

pub fn apply_registration(recon: &Image, reg: &RegistrationResult) -> Image {
    transform_image(recon, reg.rotation, reg.reflected, reg.translation)
}

const COARSE_ROT_DEG: f64 = 0.5;
const COARSE_T_MAX: i32 = 6; // half-pixels: translations in [-3, 3]
const CANDIDATES: usize = 4;
const FINE_ROT_DEG: f64 = 0.1;
const FINE_T: f64 = 0.1;
const FINE_HALF: i32 = 5;

#[derive(Clone, Copy, Debug)]
struct Candidate {
    score: f64,
    rotation: f64,
    reflected: bool,
    translation: (f64, f64),
}

/// Squared error `‖w − T‖²` for every half-pixel translation of the rotated
/// image `r`, from integer-offset correlations.
fn coarse_scores(w: &[f64], r: &[f64], side: usize, w_norm2: f64) -> Vec<(f64, (f64, f64))> {
    let n = side as isize;
    let lo = -(COARSE_T_MAX / 2) as isize;
    let hi = (COARSE_T_MAX / 2) as isize + 1;
    let span = (hi - lo + 1) as usize;
    // x[(oy - lo) * span + (ox - lo)] = Σ w(p) r(p - o)
    let mut x = vec![0.0; span * span];
    for oy in lo..=hi {
        for ox in lo..=hi {
            let mut acc = 0.0;
            for row in 0.max(oy)..n.min(n + oy) {
                let wr = &w[(row * n) as usize..((row + 1) * n) as usize];
                let rr = &r[((row - oy) * n) as usize..((row - oy + 1) * n) as usize];
                for col in 0.max(ox)..n.min(n + ox) {
                    acc += wr[col as usize] * rr[(col - ox) as usize];
                }
            }
            x[((oy - lo) as usize) * span + (ox - lo) as usize] = acc;
        }
    }
    // a[(dy + 1) * 3 + (dx + 1)] = Σ r(p) r(p - d)
    let mut a = [0.0; 9];
    for dy in -1isize..=1 {
        for dx in -1isize..=1 {
            let mut acc = 0.0;
            for row in 0.max(dy)..n.min(n + dy) {
                for col in 0.max(dx)..n.min(n + dx) {
                    acc += r[(row * n + col) as usize] * r[((row - dy) * n + col - dx) as usize];
                }
            }
            a[((dy + 1) * 3 + dx + 1) as usize] = acc;
        }
    }
    let xo = |ox: isize, oy: isize| x[((oy - lo) as usize) * span + (ox - lo) as usize];
    let ao = |dx: isize, dy: isize| a[((dy + 1) * 3 + dx + 1) as usize];
    let mut out = Vec::with_capacity(((COARSE_T_MAX * 2 + 1) * (COARSE_T_MAX * 2 + 1)) as usize);
    for hy in -COARSE_T_MAX..=COARSE_T_MAX {
        for hx in -COARSE_T_MAX..=COARSE_T_MAX {
            let (tx, ty) = (hx as f64 * 0.5, hy as f64 * 0.5);
            let (ax, fx) = (tx.floor() as isize, tx - tx.floor());
            let (ay, fy) = (ty.floor() as isize, ty - ty.floor());
            let taps = [
                (ax, ay, (1.0 - fx) * (1.0 - fy)),
                (ax + 1, ay, fx * (1.0 - fy)),
                (ax, ay + 1, (1.0 - fx) * fy),
                (ax + 1, ay + 1, fx * fy),
            ];
            let mut cross = 0.0;
            let mut self_ = 0.0;
            for &(px, py, pw) in &taps {
                if pw == 0.0 {
                    continue;
                }
                cross += pw * xo(px, py);
                for &(qx, qy, qw) in &taps {
                    if qw != 0.0 {
                        self_ += pw * qw * ao(qx - px, qy - py);
                    }
                }
            }
            out.push((w_norm2 + self_ - 2.0 * cross, (tx, ty)));
        }
    }
    out
}

fn exact_sq_error(w: &[f64], recon: &[f64], side: usize, rot: f64, refl: bool, t: (f64, f64), buf: &mut [f64]) -> f64 {
    transform_into(recon, side, rot, refl, t, buf);
    w.iter().zip(buf.iter()).map(|(a, b)| (a - b).powi(2)).sum()
}

/// Aligns `recon` to `truth` over rotation, reflection and translation and
/// returns the relative RMSE at the best alignment found.
pub fn register_and_rmse(truth: &Image, recon: &Image) -> Result<RegistrationResult> {
    check_pair(truth, recon)?;
    let side = truth.side();
    let w = truth.pixels();
    let w_norm2: f64 = w.iter().map(|v| v * v).sum();
    let steps = (360.0 / COARSE_ROT_DEG).round() as usize;

    let jobs: Vec<(usize, bool)> = [false, true].iter().flat_map(|&r| (0..steps).map(move |i| (i, r))).collect();
    let per_rotation: Vec<Vec<Candidate>> = jobs
        .par_iter()
        .map(|&(i, refl)| {
            let rot = (i as f64 * COARSE_ROT_DEG).to_radians();
            let mut r = vec![0.0; w.len()];
            transform_into(recon.pixels(), side, rot, refl, (0.0, 0.0), &mut r);
            let mut scores = coarse_scores(w, &r, side, w_norm2);
            scores.sort_by(|a, b| a.0.total_cmp(&b.0));
            scores
                .into_iter()
                .take(CANDIDATES)
                .map(|(score, translation)| Candidate { score, rotation: rot, reflected: refl, translation })
                .collect()
        })
        .collect();
    let mut all: Vec<Candidate> = per_rotation.into_iter().flatten().collect();
    all.sort_by(|a, b| a.score.total_cmp(&b.score));
    all.truncate(CANDIDATES);

    let refined: Vec<Candidate> = all
        .par_iter()
        .map(|cand| {
            let mut buf = vec![0.0; w.len()];
            let mut best = Candidate {
                score: exact_sq_error(
                    w,
                    recon.pixels(),
                    side,
                    cand.rotation,
                    cand.reflected,
                    cand.translation,
                    &mut buf,
                ),
                ..*cand
            };
            for i in -FINE_HALF..=FINE_HALF {
                let rot = (cand.rotation + (i as f64 * FINE_ROT_DEG).to_radians()).rem_euclid(TAU);
                for jy in -FINE_HALF..=FINE_HALF {
                    for jx in -FINE_HALF..=FINE_HALF {
                        let t = (cand.translation.0 + jx as f64 * FINE_T, cand.translation.1 + jy as f64 * FINE_T);
                        let s = exact_sq_error(w, recon.pixels(), side, rot, cand.reflected, t, &mut buf);
                        if s < best.score {
                            best = Candidate { score: s, rotation: rot, reflected: cand.reflected, translation: t };
                        }
                    }
                }
            }
            best
        })
        .collect();
    let best = refined.iter().fold(refined[0], |b, c| if c.score < b.score { *c } else { b });
    Ok(RegistrationResult {
        rotation: best.rotation,
        reflected: best.reflected,
        translation: best.translation,
        rmse: best.score.max(0.0).sqrt() / w_norm2.sqrt(),
    })
}

/// Distance between two angles on the circle of period π, in `[0, π/2]`.
pub fn angle_distance(a: f64, b: f64) -> f64 {
    let d = (a - b).rem_euclid(PI);
    d.min(PI - d)
}

fn signed_residual(a: f64, b: f64) -> f64 {
    (a - b + PI / 2.0).rem_euclid(PI) - PI / 2.0
}

pub fn median(values: &[f64]) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let m = v.len() / 2;
    if v.len() % 2 == 1 {
        v[m]
    } else {
        0.5 * (v[m - 1] + v[m])
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AngleAlignment {
    /// Per-item error in `[0, π/2]` after alignment.
    pub errors: Vec<f64>,
    /// Offset `δ` in `[0, π)` added to the (possibly negated) estimates.
    pub rotation: f64,
    /// Whether estimates were negated (`θ -> -θ`) before adding `δ`.
    pub reflected: bool,
}

impl AngleAlignment {
    pub fn median(&self) -> f64 {
        median(&self.errors)
    }
}

const ANGLE_GRID_DEG: f64 = 0.1;

/// Aligns estimated angles to the truth by the global offset and orientation
/// that minimize the median circular error.
pub fn angle_errors(est: &[f64], truth: &[f64]) -> Result<AngleAlignment> {
    if est.is_empty() || est.len() != truth.len() {
        return Err(Error::invalid(format!("{} estimates for {} true angles", est.len(), truth.len())));
    }
    let score = |sign: f64, delta: f64| {
        let errs: Vec<f64> = est.iter().zip(truth).map(|(e, t)| angle_distance(sign * e + delta, *t)).collect();
        median(&errs)
    };
    let steps = (180.0 / ANGLE_GRID_DEG).round() as usize;
    let mut best = (f64::INFINITY, 1.0, 0.0);
    for sign in [1.0, -1.0] {
        for i in 0..steps {
            let delta = (i as f64 * ANGLE_GRID_DEG).to_radians();
            let m = score(sign, delta);
            if m < best.0 {
                best = (m, sign, delta);
            }
        }
    }
    // polish the offset by re-centering on the median residual
    let (mut m_best, sign, mut delta) = best;
    for _ in 0..5 {
        let resid: Vec<f64> = est.iter().zip(truth).map(|(e, t)| signed_residual(sign * e + delta, *t)).collect();
        let cand = (delta - median(&resid)).rem_euclid(PI);
        let m = score(sign, cand);
        if m >= m_best {
            break;
        }
        m_best = m;
        delta = cand;
    }
    let errors = est.iter().zip(truth).map(|(e, t)| angle_distance(sign * e + delta, *t)).collect();
    Ok(AngleAlignment { errors, rotation: delta, reflected: sign < 0.0 })
}

#[derive(Clone, Debug, PartialEq)]
pub struct ShiftAlignment {
    /// `|ŝ − s − t·(cos θ̂, sin θ̂)|` per item.
    pub errors: Vec<f64>,
    /// Least-squares image translation absorbed by the estimated shifts.
    pub translation: (f64, f64),
}

impl ShiftAlignment {
    pub fn mean(&self) -> f64 {
        self.errors.iter().sum::<f64>() / self.errors.len() as f64
    }
}

/// Shift errors after removing the best-fitting translation gauge: shifting
/// the image by `t` changes every projection shift by `t·(cos θ, sin θ)`.
pub fn shift_errors(est: &[Pose], truth_shifts: &[f64]) -> Result<ShiftAlignment> {
    if est.is_empty() || est.len() != truth_shifts.len() {
        return Err(Error::invalid(format!("{} estimates for {} true shifts", est.len(), truth_shifts.len())));
    }
    let mut ata = Matrix2::zeros();
    let mut atb = Vector2::zeros();
    for (p, s) in est.iter().zip(truth_shifts) {
        let a = Vector2::new(p.angle.cos(), p.angle.sin());
        ata += a * a.transpose();
        atb += a * (p.shift - s);
    }
    let t = ata.lu().solve(&atb).unwrap_or_else(Vector2::zeros);
    let errors = est
        .iter()
        .zip(truth_shifts)
        .map(|(p, s)| (p.shift - s - t.x * p.angle.cos() - t.y * p.angle.sin()).abs())
        .collect();
    Ok(ShiftAlignment { errors, translation: (t.x, t.y) })
}
