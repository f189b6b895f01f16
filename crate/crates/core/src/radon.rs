//! Parallel-beam forward projection, detector shifts and filtered backprojection.
//!
//! The detector has one bin per image column; bin `b` sits at `rho = b - c`
//! with `c = (L - 1) / 2`. A projection at angle `theta` integrates the image
//! along lines `x cos(theta) + y sin(theta) = rho`. Only the inscribed disk of
//! radius `c` is seen by the projector.

use std::f64::consts::PI;

use rustfft::num_complex::Complex;
use rustfft::FftPlanner;

use crate::error::{Error, Result};
use crate::types::{center, Image, Pose, Projection};

/// Zeroes every pixel whose center lies outside the inscribed disk.
pub fn disk_mask(img: &Image) -> Image {
    let side = img.side();
    let c = center(side);
    let r2 = c * c + 1e-9;
    let mut px = img.pixels().to_vec();
    for row in 0..side {
        let y = row as f64 - c;
        for col in 0..side {
            let x = col as f64 - c;
            if x * x + y * y > r2 {
                px[row * side + col] = 0.0;
            }
        }
    }
    Image::from_raw_unchecked(side, px)
}

/// Whether pixel `(row, col)` lies inside the inscribed disk.
#[inline]
pub(crate) fn in_disk(side: usize, row: usize, col: usize) -> bool {
    let c = center(side);
    let (x, y) = (col as f64 - c, row as f64 - c);
    x * x + y * y <= c * c + 1e-9
}

/// Pixel-driven Radon projector bound to one (masked) image.
///
/// Projecting at `theta` samples the image rotated by `-theta` with bilinear
/// interpolation and sums each column. [`backproject`] is its exact adjoint.
pub struct Projector {
    side: usize,
    masked: Vec<f64>,
}

impl Projector {
    pub fn new(img: &Image) -> Self {
        Projector { side: img.side(), masked: disk_mask(img).into_pixels() }
    }

    pub fn side(&self) -> usize {
        self.side
    }

    pub fn project(&self, angle: f64) -> Projection {
        let mut out = vec![0.0; self.side];
        self.project_into(angle, &mut out);
        Projection::from_raw_unchecked(out)
    }

    /// Subtracts the projection at `angle` from `out`.
    pub(crate) fn project_into_sub(&self, angle: f64, out: &mut [f64]) {
        let n = self.side;
        let img = &self.masked;
        for_each_sample(n, angle, |b, i0, j0, fy, fx| {
            let mut acc = 0.0;
            bilinear_taps(n, i0, j0, fy, fx, |idx, w| acc += w * img[idx]);
            out[b] -= acc;
        });
    }

    /// Adds the projection at `angle` into `out`.
    pub fn project_into(&self, angle: f64, out: &mut [f64]) {
        let n = self.side;
        let img = &self.masked;
        for_each_sample(n, angle, |b, i0, j0, fy, fx| {
            let mut acc = 0.0;
            bilinear_taps(n, i0, j0, fy, fx, |idx, w| acc += w * img[idx]);
            out[b] += acc;
        });
    }
}

/// Visits every sample of the rotated grid as `(bin, row0, col0, frac_row, frac_col)`.
#[inline]
fn for_each_sample(n: usize, angle: f64, mut f: impl FnMut(usize, isize, isize, f64, f64)) {
    let c = center(n);
    let (s, co) = angle.sin_cos();
    let lo = -1.0;
    let hi = n as f64;
    for b in 0..n {
        let xp = b as f64 - c;
        // sample point for t: col = col0 - t*s, row = row0 + t*co
        let col0 = xp * co + c * s + c;
        let row0 = xp * s - c * co + c;
        for t in 0..n {
            let tf = t as f64;
            let col = col0 - tf * s;
            let row = row0 + tf * co;
            if col <= lo || row <= lo || col >= hi || row >= hi {
                continue;
            }
            let jf = col.floor();
            let rf = row.floor();
            f(b, rf as isize, jf as isize, row - rf, col - jf);
        }
    }
}

#[inline]
fn bilinear_taps(n: usize, i0: isize, j0: isize, fy: f64, fx: f64, mut tap: impl FnMut(usize, f64)) {
    let n = n as isize;
    let w = [(0, 0, (1.0 - fy) * (1.0 - fx)), (0, 1, (1.0 - fy) * fx), (1, 0, fy * (1.0 - fx)), (1, 1, fy * fx)];
    for (di, dj, wt) in w {
        let (i, j) = (i0 + di, j0 + dj);
        if i >= 0 && j >= 0 && i < n && j < n && wt != 0.0 {
            tap((i * n + j) as usize, wt);
        }
    }
}

/// Line integrals of `img` at `angle`, one bin per image column.
pub fn forward_project(img: &Image, angle: f64) -> Projection {
    Projector::new(img).project(angle)
}

/// Exact adjoint of [`forward_project`] summed over the given angles (no filtering).
pub fn backproject(projections: &[Projection], angles: &[f64], side: usize) -> Result<Image> {
    if projections.len() != angles.len() {
        return Err(Error::invalid("one angle per projection is required"));
    }
    let mut acc = vec![0.0; side * side];
    for (p, &a) in projections.iter().zip(angles) {
        if p.len() != side {
            return Err(Error::invalid(format!("projection has {} bins, detector needs {side}", p.len())));
        }
        backproject_into(p.bins(), a, side, &mut acc);
    }
    apply_mask(side, &mut acc);
    Ok(Image::from_raw_unchecked(side, acc))
}

/// Adds the unmasked adjoint of one projection into `acc`.
pub(crate) fn backproject_into(bins: &[f64], angle: f64, side: usize, acc: &mut [f64]) {
    for_each_sample(side, angle, |b, i0, j0, fy, fx| {
        let g = bins[b];
        if g != 0.0 {
            bilinear_taps(side, i0, j0, fy, fx, |idx, w| acc[idx] += w * g);
        }
    });
}

pub(crate) fn apply_mask(side: usize, px: &mut [f64]) {
    for row in 0..side {
        for col in 0..side {
            if !in_disk(side, row, col) {
                px[row * side + col] = 0.0;
            }
        }
    }
}

/// Translates a projection by `s` bins (positive moves mass to higher bins)
/// with linear interpolation and zero fill.
pub fn shift_projection(p: &Projection, s: f64) -> Result<Projection> {
    let bound = p.len() as f64 / 4.0;
    if !s.is_finite() || s.abs() > bound {
        return Err(Error::invalid(format!("shift {s} exceeds bound {bound}")));
    }
    let mut out = vec![0.0; p.len()];
    shift_into(p.bins(), s, &mut out);
    Ok(Projection::from_raw_unchecked(out))
}

/// Unchecked shift used on hot paths: `out[i] = src(i - s)`.
pub(crate) fn shift_into(src: &[f64], s: f64, out: &mut [f64]) {
    let n = src.len() as isize;
    if s == 0.0 {
        out.copy_from_slice(src);
        return;
    }
    let fl = s.floor();
    let k = fl as isize;
    let f = s - fl;
    // out[i] = (1-f) * src[i-k] + f * src[i-k-1]
    for (i, o) in out.iter_mut().enumerate() {
        let j = i as isize - k;
        let a = if j >= 0 && j < n { src[j as usize] } else { 0.0 };
        let b = if j >= 1 && j - 1 < n { src[(j - 1) as usize] } else { 0.0 };
        *o = (1.0 - f) * a + f * b;
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FilterKind {
    RamLak,
    SheppLogan,
}

/// Ramp filter used by [`fbp_reconstruct`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FbpFilter {
    pub kind: FilterKind,
    /// Fraction of the Nyquist frequency kept, in `(0, 1]`.
    pub cutoff: f64,
}

impl Default for FbpFilter {
    fn default() -> Self {
        FbpFilter { kind: FilterKind::RamLak, cutoff: 1.0 }
    }
}

impl FbpFilter {
    pub fn validate(&self) -> Result<()> {
        if !(self.cutoff > 0.0 && self.cutoff <= 1.0) {
            return Err(Error::invalid(format!("filter cutoff {} not in (0, 1]", self.cutoff)));
        }
        Ok(())
    }

    /// Frequency response on a padded grid of `len` samples.
    fn response(&self, len: usize) -> Vec<f64> {
        // spatial ramp kernel with unit sampling: h[0] = 1/4, h[odd] = -1/(pi n)^2
        let mut h = vec![Complex::new(0.0, 0.0); len];
        h[0].re = 0.25;
        for n in (1..len / 2).step_by(2) {
            let v = -1.0 / (PI * PI * (n * n) as f64);
            h[n].re = v;
            h[len - n].re = v;
        }
        let mut planner = FftPlanner::<f64>::new();
        planner.plan_fft_forward(len).process(&mut h);
        (0..len)
            .map(|k| {
                let f = k.min(len - k) as f64 / len as f64; // cycles per sample, [0, 0.5]
                let nu = f / (0.5 * self.cutoff);
                if nu > 1.0 + 1e-12 {
                    return 0.0;
                }
                let window = match self.kind {
                    FilterKind::RamLak => 1.0,
                    FilterKind::SheppLogan => {
                        let a = 0.5 * PI * nu;
                        if a == 0.0 {
                            1.0
                        } else {
                            a.sin() / a
                        }
                    }
                };
                h[k].re * window
            })
            .collect()
    }
}

/// Applies the ramp filter to many projections sharing one length.
pub(crate) struct RampFilter {
    len: usize,
    padded: usize,
    response: Vec<f64>,
    fwd: std::sync::Arc<dyn rustfft::Fft<f64>>,
    inv: std::sync::Arc<dyn rustfft::Fft<f64>>,
}

impl RampFilter {
    pub(crate) fn new(filter: &FbpFilter, len: usize) -> Self {
        let padded = (2 * len).next_power_of_two();
        let mut planner = FftPlanner::<f64>::new();
        RampFilter {
            len,
            padded,
            response: filter.response(padded),
            fwd: planner.plan_fft_forward(padded),
            inv: planner.plan_fft_inverse(padded),
        }
    }

    pub(crate) fn apply(&self, bins: &[f64]) -> Vec<f64> {
        let mut buf = vec![Complex::new(0.0, 0.0); self.padded];
        for (b, &v) in buf.iter_mut().zip(bins) {
            b.re = v;
        }
        self.fwd.process(&mut buf);
        for (b, &h) in buf.iter_mut().zip(&self.response) {
            *b *= h;
        }
        self.inv.process(&mut buf);
        let scale = 1.0 / self.padded as f64;
        buf[..self.len].iter().map(|c| c.re * scale).collect()
    }
}

/// Angular quadrature weights for backprojection at arbitrary angles.
///
/// Coincident angles form one group. Each group gets half the arc to its
/// neighbouring groups on the circle of period pi, capped at twice the median
/// group arc so angles bordering an empty wedge are not over-weighted, and the
/// arc is split evenly among the group's members.
pub fn angular_weights(angles: &[f64]) -> Vec<f64> {
    const SAME: f64 = 1e-9;
    let n = angles.len();
    if n == 0 {
        return Vec::new();
    }
    let canon: Vec<f64> = angles.iter().map(|a| a.rem_euclid(PI)).collect();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| canon[a].total_cmp(&canon[b]).then(a.cmp(&b)));
    let mut groups: Vec<Vec<usize>> = Vec::new();
    for &i in &order {
        match groups.last_mut() {
            Some(g) if canon[i] - canon[g[0]] < SAME => g.push(i),
            _ => groups.push(vec![i]),
        }
    }
    if groups.len() > 1 && canon[groups[0][0]] + PI - canon[groups[groups.len() - 1][0]] < SAME {
        let last = groups.pop().expect("more than one group");
        groups[0].extend(last);
    }
    let m = groups.len();
    if m == 1 {
        return vec![PI / n as f64; n];
    }
    let pos: Vec<f64> = groups.iter().map(|g| canon[g[0]]).collect();
    let mut arcs: Vec<f64> = (0..m)
        .map(|k| {
            let before = (pos[k] - pos[(k + m - 1) % m]).rem_euclid(PI);
            let after = (pos[(k + 1) % m] - pos[k]).rem_euclid(PI);
            0.5 * (before + after)
        })
        .collect();
    let mut sorted = arcs.clone();
    sorted.sort_by(f64::total_cmp);
    let cap = 2.0 * sorted[m / 2];
    for a in &mut arcs {
        *a = a.min(cap);
    }
    let mut w = vec![0.0; n];
    for (g, arc) in groups.iter().zip(&arcs) {
        for &i in g {
            w[i] = arc / g.len() as f64;
        }
    }
    w
}

/// Filtered backprojection at the given poses; each projection is shifted back
/// by its pose shift before filtering.
pub fn fbp_reconstruct(projections: &[Projection], poses: &[Pose], filter: &FbpFilter, side: usize) -> Result<Image> {
    if projections.is_empty() {
        return Err(Error::invalid("cannot reconstruct from an empty projection set"));
    }
    if projections.len() != poses.len() {
        return Err(Error::invalid(format!("{} poses for {} projections", poses.len(), projections.len())));
    }
    filter.validate()?;
    let len = projections[0].len();
    let ramp = RampFilter::new(filter, len);
    let angles: Vec<f64> = poses.iter().map(|p| p.angle).collect();
    let weights = angular_weights(&angles);
    let mut unshifted = vec![0.0; len];
    let mut acc = vec![0.0; side * side];
    for ((p, pose), &wt) in projections.iter().zip(poses).zip(&weights) {
        if p.len() != len {
            return Err(Error::invalid("projections differ in length"));
        }
        if pose.shift.abs() > len as f64 / 4.0 {
            return Err(Error::invalid(format!("pose shift {} exceeds bound", pose.shift)));
        }
        shift_into(p.bins(), -pose.shift, &mut unshifted);
        let filtered = ramp.apply(&unshifted);
        backproject_interp(&filtered, pose.angle, wt, side, &mut acc);
    }
    apply_mask(side, &mut acc);
    Ok(Image::from_raw_unchecked(side, acc))
}

/// Voxel-driven backprojection with linear interpolation on the detector.
pub(crate) fn backproject_interp(q: &[f64], angle: f64, weight: f64, side: usize, acc: &mut [f64]) {
    let c_img = center(side);
    let c_det = center(q.len());
    let (s, co) = angle.sin_cos();
    let last = q.len() as isize - 1;
    for row in 0..side {
        let y = row as f64 - c_img;
        let base = y * s + c_det;
        for col in 0..side {
            let x = col as f64 - c_img;
            let pos = x * co + base;
            let i0 = pos.floor();
            let f = pos - i0;
            let i0 = i0 as isize;
            let a = if (0..=last).contains(&i0) { q[i0 as usize] } else { 0.0 };
            let b = if (0..=last).contains(&(i0 + 1)) { q[(i0 + 1) as usize] } else { 0.0 };
            acc[row * side + col] += weight * ((1.0 - f) * a + f * b);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::phantom;
    use rand::Rng;

    fn impulse(side: usize) -> Image {
        let mut px = vec![0.0; side * side];
        px[(side / 2) * side + side / 2] = 1.0;
        Image::new(side, px).unwrap()
    }

    #[test]
    fn centered_impulse_projects_to_center_bin() {
        let img = impulse(21);
        for a in [0.0, 0.3, 1.0, 2.5] {
            let p = forward_project(&img, a);
            // a point is smeared over neighbouring samples by bilinear interpolation
            assert!((p.mass() - 1.0).abs() < 0.35, "mass {} at {a}", p.mass());
            assert!(p.bins()[10] >= 0.9);
            assert!(p.bins().iter().enumerate().all(|(i, &v)| i.abs_diff(10) <= 1 || v == 0.0));
        }
    }

    #[test]
    fn zero_angle_gives_column_sums() {
        let img = phantom::random_phantom(32, crate::types::RngSeed(5));
        let p = forward_project(&img, 0.0);
        for col in 0..32 {
            let s: f64 = (0..32).map(|r| img.get(r, col)).sum();
            assert!((p.bins()[col] - s).abs() < 1e-12);
        }
    }

    #[test]
    fn disk_projection_is_angle_invariant() {
        let img = phantom::uniform_disk(64, 20.0);
        let a = forward_project(&img, 0.0);
        let b = forward_project(&img, PI / 3.0);
        let num: f64 = a.bins().iter().zip(b.bins()).map(|(x, y)| (x - y).powi(2)).sum();
        let den: f64 = a.bins().iter().map(|x| x * x).sum();
        assert!((num / den).sqrt() < 1e-2);
    }

    #[test]
    fn mass_is_conserved() {
        let img = phantom::random_phantom(64, crate::types::RngSeed(9));
        let m = img.mass();
        for k in 0..4 {
            let p = forward_project(&img, k as f64 * PI / 2.0);
            assert!(((p.mass() - m) / m).abs() < 1e-6);
        }
        for a in [0.1, 0.7, 1.3, 2.9] {
            let p = forward_project(&img, a);
            assert!(((p.mass() - m) / m).abs() < 1e-2);
        }
    }

    #[test]
    fn shift_examples() {
        let mut bins = vec![0.0; 101];
        bins[50] = 1.0;
        let p = Projection::new(bins).unwrap();
        assert_eq!(shift_projection(&p, 0.0).unwrap(), p);
        let s2 = shift_projection(&p, 2.0).unwrap();
        assert_eq!(s2.bins()[52], 1.0);
        assert!((s2.mass() - 1.0).abs() < 1e-15);
        let half = shift_projection(&p, 0.5).unwrap();
        assert!((half.bins()[50] - 0.5).abs() < 1e-15);
        assert!((half.bins()[51] - 0.5).abs() < 1e-15);
        assert!(shift_projection(&p, 30.0).is_err());
    }

    #[test]
    fn integer_shift_round_trips_on_interior() {
        let mut rng = rng(3);
        let mut bins = vec![0.0; 64];
        for b in bins.iter_mut().take(54).skip(10) {
            *b = rng.gen::<f64>();
        }
        let p = Projection::new(bins).unwrap();
        for s in [-3.0, -1.0, 2.0, 5.0] {
            let back = shift_projection(&shift_projection(&p, s).unwrap(), -s).unwrap();
            assert_eq!(back, p);
        }
    }

    #[test]
    fn shift_preserves_interior_mass() {
        let mut bins = vec![0.0; 64];
        for (i, b) in bins.iter_mut().enumerate().take(50).skip(14) {
            *b = (i as f64 * 0.3).sin().abs();
        }
        let p = Projection::new(bins).unwrap();
        for s in [-2.75, -0.3, 1.1, 4.5] {
            let q = shift_projection(&p, s).unwrap();
            assert!((q.mass() - p.mass()).abs() < 1e-12);
        }
    }

    #[test]
    fn backprojection_is_adjoint() {
        let side = 24;
        let mut rng = rng(11);
        let img = Image::new(side, (0..side * side).map(|_| rng.gen::<f64>()).collect()).unwrap();
        let angles: Vec<f64> = (0..7).map(|_| rng.gen::<f64>() * PI).collect();
        let sino: Vec<Projection> =
            (0..7).map(|_| Projection::new((0..side).map(|_| rng.gen::<f64>() - 0.5).collect()).unwrap()).collect();
        let lhs: f64 = angles
            .iter()
            .zip(&sino)
            .map(|(&a, b)| {
                let p = forward_project(&img, a);
                p.bins().iter().zip(b.bins()).map(|(x, y)| x * y).sum::<f64>()
            })
            .sum();
        let bp = backproject(&sino, &angles, side).unwrap();
        let rhs: f64 = img.pixels().iter().zip(bp.pixels()).map(|(x, y)| x * y).sum();
        assert!(((lhs - rhs) / lhs.abs()).abs() < 1e-6, "{lhs} vs {rhs}");
    }

    #[test]
    fn fbp_of_zero_projections_is_zero() {
        let sino = vec![Projection::zeros(32); 10];
        let poses: Vec<Pose> = (0..10).map(|i| Pose::new(i as f64 * 0.3, 0.0).unwrap()).collect();
        let img = fbp_reconstruct(&sino, &poses, &FbpFilter::default(), 32).unwrap();
        assert!(img.pixels().iter().all(|v| v.abs() <= 1e-12));
    }

    #[test]
    fn fbp_rejects_empty_input() {
        assert!(fbp_reconstruct(&[], &[], &FbpFilter::default(), 16).is_err());
    }

    #[test]
    fn single_projection_smears_along_rays() {
        let side = 41;
        let img = phantom::random_phantom(side, crate::types::RngSeed(2));
        let p = forward_project(&img, 0.0);
        let pose = [Pose::new(0.0, 0.0).unwrap()];
        let out = fbp_reconstruct(std::slice::from_ref(&p), &pose, &FbpFilter::default(), side).unwrap();
        // at angle 0 every column of the disk interior carries one filtered value
        let mid = side / 2;
        for col in 12..29 {
            let a = out.get(mid, col);
            let b = out.get(mid + 5, col);
            assert!((a - b).abs() < 1e-9);
        }
        // adjoint identity: <fbp, 1> equals <filtered projection * weight, chord lengths>
        let ramp = RampFilter::new(&FbpFilter::default(), side);
        let q = ramp.apply(p.bins());
        let chord = forward_project(&Image::new(side, vec![1.0; side * side]).unwrap(), 0.0);
        let expect: f64 = PI * q.iter().zip(chord.bins()).map(|(a, b)| a * b).sum::<f64>();
        let got = out.mass();
        assert!((got - expect).abs() <= 1e-2 * expect.abs().max(p.mass() * 1e-3));
    }

    #[test]
    fn angular_weights_sum_to_pi_for_uniform_angles() {
        let a: Vec<f64> = (0..90).map(|i| i as f64 * PI / 90.0).collect();
        let w = angular_weights(&a);
        assert!((w.iter().sum::<f64>() - PI).abs() < 1e-12);
    }

    #[test]
    fn coincident_angles_share_their_arc() {
        let a = [0.0, 0.5, 0.5, 0.5, 1.0, 2.0];
        let w = angular_weights(&a);
        assert!((w.iter().sum::<f64>() - PI).abs() < 1e-12);
        assert_eq!(w[1], w[2]);
        assert!((3.0 * w[1] - 0.5).abs() < 1e-12);
        let same = angular_weights(&[0.3; 4]);
        assert!(same.iter().all(|&x| (x - PI / 4.0).abs() < 1e-15));
        assert_eq!(angular_weights(&[1.0]), vec![PI]);
    }

    fn rng(seed: u64) -> rand_chacha::ChaCha8Rng {
        crate::types::RngSeed(seed).rng()
    }
}
