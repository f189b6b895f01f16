//! Domain types shared by every stage of the reconstruction pipeline.

use std::f64::consts::PI;

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// Square grid of real intensities, stored row-major.
///
/// Pixel `(row, col)` sits at centered coordinates `x = col - c`, `y = row - c`
/// with `c = (side - 1) / 2`.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    side: usize,
    pixels: Vec<f64>,
}

impl Image {
    pub fn new(side: usize, pixels: Vec<f64>) -> Result<Self> {
        if side < 2 {
            return Err(Error::invalid(format!("image side must be >= 2, got {side}")));
        }
        if pixels.len() != side * side {
            return Err(Error::invalid(format!(
                "expected {} pixels for side {side}, got {}",
                side * side,
                pixels.len()
            )));
        }
        if let Some(i) = pixels.iter().position(|v| !v.is_finite()) {
            return Err(Error::invalid(format!("pixel {i} is not finite")));
        }
        Ok(Image { side, pixels })
    }

    pub fn zeros(side: usize) -> Self {
        assert!(side >= 2, "image side must be >= 2");
        Image { side, pixels: vec![0.0; side * side] }
    }

    /// Builds an image by evaluating `f(x, y)` at each pixel center (centered coordinates).
    pub fn from_fn(side: usize, mut f: impl FnMut(f64, f64) -> f64) -> Result<Self> {
        let c = center(side);
        let mut pixels = Vec::with_capacity(side * side);
        for row in 0..side {
            for col in 0..side {
                pixels.push(f(col as f64 - c, row as f64 - c));
            }
        }
        Image::new(side, pixels)
    }

    pub fn side(&self) -> usize {
        self.side
    }

    pub fn pixels(&self) -> &[f64] {
        &self.pixels
    }

    pub fn into_pixels(self) -> Vec<f64> {
        self.pixels
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.pixels[row * self.side + col]
    }

    pub fn mass(&self) -> f64 {
        self.pixels.iter().sum()
    }

    pub fn norm(&self) -> f64 {
        self.pixels.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    /// Applies `f` to every pixel; the result must stay finite.
    pub fn map(&self, f: impl Fn(f64) -> f64) -> Result<Image> {
        Image::new(self.side, self.pixels.iter().map(|&v| f(v)).collect())
    }

    pub(crate) fn from_raw_unchecked(side: usize, pixels: Vec<f64>) -> Self {
        debug_assert_eq!(pixels.len(), side * side);
        debug_assert!(pixels.iter().all(|v| v.is_finite()));
        Image { side, pixels }
    }
}

/// Center coordinate of a grid (or detector) with `n` samples.
#[inline]
pub fn center(n: usize) -> f64 {
    (n as f64 - 1.0) / 2.0
}

/// A single 1D parallel-beam projection.
#[derive(Clone, Debug, PartialEq)]
pub struct Projection {
    bins: Vec<f64>,
}

impl Projection {
    pub fn new(bins: Vec<f64>) -> Result<Self> {
        if bins.is_empty() {
            return Err(Error::invalid("projection must have at least one bin"));
        }
        if let Some(i) = bins.iter().position(|v| !v.is_finite()) {
            return Err(Error::invalid(format!("projection bin {i} is not finite")));
        }
        Ok(Projection { bins })
    }

    pub fn zeros(len: usize) -> Self {
        Projection { bins: vec![0.0; len] }
    }

    pub fn bins(&self) -> &[f64] {
        &self.bins
    }

    pub fn len(&self) -> usize {
        self.bins.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bins.is_empty()
    }

    pub fn mass(&self) -> f64 {
        self.bins.iter().sum()
    }

    pub fn into_bins(self) -> Vec<f64> {
        self.bins
    }

    pub(crate) fn from_raw_unchecked(bins: Vec<f64>) -> Self {
        debug_assert!(bins.iter().all(|v| v.is_finite()));
        Projection { bins }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum OutlierClass {
    None,
    Class1,
    Class2,
}

impl OutlierClass {
    pub fn code(self) -> u8 {
        match self {
            OutlierClass::None => 0,
            OutlierClass::Class1 => 1,
            OutlierClass::Class2 => 2,
        }
    }

    pub fn from_code(code: u8) -> Result<Self> {
        match code {
            0 => Ok(OutlierClass::None),
            1 => Ok(OutlierClass::Class1),
            2 => Ok(OutlierClass::Class2),
            other => Err(Error::format(format!("unknown outlier class {other}"))),
        }
    }
}

/// Hidden acquisition parameters of one simulated projection.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TruthRecord {
    pub angle: f64,
    pub shift: f64,
    pub outlier_class: OutlierClass,
}

/// A collection of equal-length projections, optionally with ground truth.
#[derive(Clone, Debug, PartialEq)]
pub struct ProjectionSet {
    projections: Vec<Projection>,
    truth: Option<Vec<TruthRecord>>,
    noise_sigma: Option<f64>,
}

impl ProjectionSet {
    pub fn new(projections: Vec<Projection>) -> Result<Self> {
        if let Some(first) = projections.first() {
            let len = first.len();
            if let Some(i) = projections.iter().position(|p| p.len() != len) {
                return Err(Error::invalid(format!(
                    "projection {i} has {} bins, expected {len}",
                    projections[i].len()
                )));
            }
        }
        Ok(ProjectionSet { projections, truth: None, noise_sigma: None })
    }

    pub fn with_truth(mut self, truth: Vec<TruthRecord>) -> Result<Self> {
        if truth.len() != self.projections.len() {
            return Err(Error::invalid(format!(
                "{} truth records for {} projections",
                truth.len(),
                self.projections.len()
            )));
        }
        let mut truth = truth;
        for t in &mut truth {
            t.angle = canonicalize_angle(t.angle)?;
        }
        self.truth = Some(truth);
        Ok(self)
    }

    /// Records the per-bin noise standard deviation the data were generated with.
    pub fn with_noise_sigma(mut self, sigma: f64) -> Result<Self> {
        if !(sigma.is_finite() && sigma >= 0.0) {
            return Err(Error::invalid(format!("noise sigma must be >= 0, got {sigma}")));
        }
        self.noise_sigma = Some(sigma);
        Ok(self)
    }

    pub fn projections(&self) -> &[Projection] {
        &self.projections
    }

    pub fn truth(&self) -> Option<&[TruthRecord]> {
        self.truth.as_deref()
    }

    pub fn noise_sigma(&self) -> Option<f64> {
        self.noise_sigma
    }

    pub fn len(&self) -> usize {
        self.projections.len()
    }

    pub fn is_empty(&self) -> bool {
        self.projections.is_empty()
    }

    /// Detector length, or 0 for an empty set.
    pub fn bins(&self) -> usize {
        self.projections.first().map_or(0, Projection::len)
    }
}

/// Acquisition pose of one projection.
///
/// `shift` follows the acquisition convention: the observed projection is the
/// unshifted one translated by `+shift` bins, so undoing it means shifting by
/// `-shift`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Pose {
    pub angle: f64,
    pub shift: f64,
}

impl Pose {
    pub fn new(angle: f64, shift: f64) -> Result<Self> {
        if !shift.is_finite() {
            return Err(Error::invalid("pose shift must be finite"));
        }
        Ok(Pose { angle: canonicalize_angle(angle)?, shift })
    }
}

/// Reduces an angle modulo pi into `[0, pi)`.
pub fn canonicalize_angle(a: f64) -> Result<f64> {
    if !a.is_finite() {
        return Err(Error::invalid(format!("angle must be finite, got {a}")));
    }
    let r = a.rem_euclid(PI);
    // rem_euclid can round up to exactly PI for tiny negative inputs
    Ok(if r >= PI { 0.0 } else { r })
}

/// Master seed for every random draw in a run.
///
/// Parallel work derives per-task seeds with [`RngSeed::derive`] so results do
/// not depend on how tasks are scheduled.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct RngSeed(pub u64);

impl RngSeed {
    pub fn derive(self, task: u64) -> RngSeed {
        let mut z = self.0 ^ splitmix64(task.wrapping_add(0x632B_E59B_D9B4_E019));
        z = splitmix64(z);
        RngSeed(z)
    }

    pub fn rng(self) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(self.0)
    }
}

fn splitmix64(x: u64) -> u64 {
    let mut z = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}
