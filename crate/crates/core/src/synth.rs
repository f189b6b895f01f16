//! Simulated acquisitions: random view angles, random detector shifts,
//! additive Gaussian noise and two kinds of outliers.
//!
//! * class 1: projections of an unrelated object (rescaled to the same mass);
//! * class 2: projections of one copy of the object with a random subset of pixels zeroed.

use std::f64::consts::PI;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::radon::{disk_mask, shift_into, Projector};
use crate::types::{canonicalize_angle, Image, OutlierClass, Projection, ProjectionSet, RngSeed, TruthRecord};

// sub-streams of the dataset seed
const STREAM_LABELS: u64 = 1;
const STREAM_ANGLES: u64 = 2;
const STREAM_SHIFTS: u64 = 3;
const STREAM_SOURCES: u64 = 4;
const STREAM_NOISE: u64 = 5;
const STREAM_DAMAGE: u64 = 6;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Segment {
    pub lo: f64,
    pub hi: f64,
    pub weight: f64,
}

/// Mixture of uniform distributions on sub-intervals of `[0, pi)`.
#[derive(Clone, Debug, PartialEq)]
pub struct AngleDistribution {
    segments: Vec<Segment>,
}

impl AngleDistribution {
    pub fn new(segments: Vec<Segment>) -> Result<Self> {
        if segments.is_empty() {
            return Err(Error::invalid("angle distribution needs at least one segment"));
        }
        for s in &segments {
            if !(s.lo >= 0.0 && s.lo < s.hi && s.hi <= PI) {
                return Err(Error::invalid(format!("segment [{}, {}) must satisfy 0 <= lo < hi <= pi", s.lo, s.hi)));
            }
            if !(s.weight >= 0.0 && s.weight.is_finite()) {
                return Err(Error::invalid(format!("segment weight {} must be >= 0", s.weight)));
            }
        }
        if segments.iter().all(|s| s.weight == 0.0) {
            return Err(Error::invalid("segment weights are all zero"));
        }
        Ok(AngleDistribution { segments })
    }

    pub fn uniform() -> Self {
        AngleDistribution { segments: vec![Segment { lo: 0.0, hi: PI, weight: 1.0 }] }
    }

    /// Four disjoint arcs of total length 5pi/9, weighted by length.
    pub fn four_segment() -> Self {
        let arcs = [(0.0, 1.0), (2.0, 3.0), (4.0, 6.0), (7.0, 8.0)];
        let segments =
            arcs.iter().map(|&(a, b)| Segment { lo: a * PI / 9.0, hi: b * PI / 9.0, weight: (b - a) }).collect();
        AngleDistribution { segments }
    }

    pub fn segments(&self) -> &[Segment] {
        &self.segments
    }
}

impl FromStr for AngleDistribution {
    type Err = Error;

    /// Parses `lo:hi:w,lo:hi:w,...` (radians). The names `uniform` and
    /// `four-segment` are accepted as shorthands.
    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "uniform" => return Ok(Self::uniform()),
            "four-segment" => return Ok(Self::four_segment()),
            _ => {}
        }
        let segments = s
            .split(',')
            .map(|part| {
                let f: Vec<&str> = part.split(':').collect();
                if f.len() != 3 {
                    return Err(Error::invalid(format!("segment `{part}` is not lo:hi:w")));
                }
                let num = |x: &str| {
                    x.trim().parse::<f64>().map_err(|_| Error::invalid(format!("bad number `{x}` in `{part}`")))
                };
                Ok(Segment { lo: num(f[0])?, hi: num(f[1])?, weight: num(f[2])? })
            })
            .collect::<Result<Vec<_>>>()?;
        AngleDistribution::new(segments)
    }
}

impl std::fmt::Display for AngleDistribution {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let parts: Vec<String> = self.segments.iter().map(|s| format!("{}:{}:{}", s.lo, s.hi, s.weight)).collect();
        f.write_str(&parts.join(","))
    }
}

/// Draws `count` angles: a segment by weight, then uniformly inside it.
pub fn sample_angles(count: usize, dist: &AngleDistribution, seed: RngSeed) -> Vec<f64> {
    let mut rng = seed.rng();
    let total: f64 = dist.segments.iter().map(|s| s.weight).sum();
    (0..count)
        .map(|_| {
            let mut u = rng.gen::<f64>() * total;
            let seg = dist
                .segments
                .iter()
                .find(|s| {
                    if u < s.weight {
                        true
                    } else {
                        u -= s.weight;
                        false
                    }
                })
                .unwrap_or_else(|| dist.segments.iter().rev().find(|s| s.weight > 0.0).expect("positive weight"));
            let a = seg.lo + rng.gen::<f64>() * (seg.hi - seg.lo);
            canonicalize_angle(a.min(seg.hi)).expect("finite angle")
        })
        .collect()
}

#[derive(Clone, Debug)]
pub struct CorruptionConfig {
    /// Noise standard deviation as a percentage of the mean noiseless bin value.
    pub noise_pct: f64,
    /// Percentage of class-1 outliers.
    pub f1_pct: f64,
    /// Percentage of class-2 outliers.
    pub f2_pct: f64,
    /// Percentage of pixels zeroed in the class-2 source image.
    pub f3_pct: f64,
    /// Detector shifts are drawn from `Uniform(-max_shift, max_shift)`.
    pub max_shift: f64,
    pub alien_images: Vec<Image>,
}

impl Default for CorruptionConfig {
    fn default() -> Self {
        CorruptionConfig {
            noise_pct: 0.0,
            f1_pct: 0.0,
            f2_pct: 0.0,
            f3_pct: 10.0,
            max_shift: 0.0,
            alien_images: Vec::new(),
        }
    }
}

impl CorruptionConfig {
    pub fn validate(&self, side: usize) -> Result<()> {
        let pct = |name: &str, v: f64| {
            if v.is_finite() && (0.0..=100.0).contains(&v) {
                Ok(())
            } else {
                Err(Error::invalid(format!("{name} = {v} must lie in [0, 100]")))
            }
        };
        pct("f1_pct", self.f1_pct)?;
        pct("f2_pct", self.f2_pct)?;
        pct("f3_pct", self.f3_pct)?;
        if self.f1_pct + self.f2_pct > 100.0 {
            return Err(Error::invalid("f1_pct + f2_pct exceeds 100"));
        }
        if !(self.noise_pct.is_finite() && self.noise_pct >= 0.0) {
            return Err(Error::invalid(format!("noise_pct {} must be >= 0", self.noise_pct)));
        }
        if !(self.max_shift >= 0.0 && self.max_shift <= side as f64 / 4.0) {
            return Err(Error::invalid(format!("max_shift {} must lie in [0, {}]", self.max_shift, side as f64 / 4.0)));
        }
        if self.f1_pct > 0.0 && self.alien_images.is_empty() {
            return Err(Error::invalid("class-1 outliers requested without alien images"));
        }
        if let Some(a) = self.alien_images.iter().find(|a| a.side() != side) {
            return Err(Error::invalid(format!("alien image side {} differs from object side {side}", a.side())));
        }
        Ok(())
    }
}

fn round_pct(count: usize, pct: f64) -> usize {
    (count as f64 * pct / 100.0).round() as usize
}

enum Source {
    Object,
    Alien(usize),
    Damaged,
}

/// Simulates `count` projections of `img` under `corrupt`.
///
/// The returned set carries ground-truth poses and outlier labels and records
/// the noise standard deviation that was applied.
pub fn generate_dataset(
    img: &Image,
    count: usize,
    dist: &AngleDistribution,
    corrupt: &CorruptionConfig,
    seed: RngSeed,
) -> Result<ProjectionSet> {
    if count == 0 {
        return Err(Error::invalid("count must be >= 1"));
    }
    let side = img.side();
    corrupt.validate(side)?;

    let n1 = round_pct(count, corrupt.f1_pct);
    let n2 = round_pct(count, corrupt.f2_pct).min(count - n1);
    let mut labels = vec![OutlierClass::None; count];
    labels[..n1].fill(OutlierClass::Class1);
    labels[n1..n1 + n2].fill(OutlierClass::Class2);
    labels.shuffle(&mut seed.derive(STREAM_LABELS).rng());

    let angles = sample_angles(count, dist, seed.derive(STREAM_ANGLES));
    let shifts: Vec<f64> = {
        let mut rng = seed.derive(STREAM_SHIFTS).rng();
        (0..count)
            .map(|_| if corrupt.max_shift > 0.0 { rng.gen_range(-corrupt.max_shift..=corrupt.max_shift) } else { 0.0 })
            .collect()
    };
    let sources: Vec<Source> = {
        let mut rng = seed.derive(STREAM_SOURCES).rng();
        labels
            .iter()
            .map(|l| match l {
                OutlierClass::None => Source::Object,
                OutlierClass::Class1 => Source::Alien(rng.gen_range(0..corrupt.alien_images.len())),
                OutlierClass::Class2 => Source::Damaged,
            })
            .collect()
    };

    let object = disk_mask(img);
    let mass = object.mass();
    let projector = Projector::new(&object);
    let aliens: Vec<Projector> = corrupt
        .alien_images
        .iter()
        .map(|a| {
            let a = disk_mask(a);
            let m = a.mass();
            let scale = if m.abs() > 0.0 { mass / m } else { 1.0 };
            Projector::new(&a.map(|v| v * scale).expect("finite"))
        })
        .collect();
    let zeroed = round_pct(side * side, corrupt.f3_pct);
    let damaged = Projector::new(&damage(&object, zeroed, seed.derive(STREAM_DAMAGE)));

    let clean: Vec<Vec<f64>> = (0..count)
        .into_par_iter()
        .map(|i| {
            let raw = match sources[i] {
                Source::Object => projector.project(angles[i]),
                Source::Alien(k) => aliens[k].project(angles[i]),
                Source::Damaged => damaged.project(angles[i]),
            };
            let mut out = vec![0.0; side];
            shift_into(raw.bins(), shifts[i], &mut out);
            out
        })
        .collect();

    let total: f64 = clean.iter().flat_map(|p| p.iter()).sum();
    let mean_bin = total / (count * side) as f64;
    let sigma = corrupt.noise_pct / 100.0 * mean_bin;

    let projections: Vec<Projection> = clean
        .into_par_iter()
        .enumerate()
        .map(|(i, mut bins)| {
            if sigma > 0.0 {
                let mut rng = seed.derive(STREAM_NOISE).derive(i as u64).rng();
                let normal = Normal::new(0.0, sigma).expect("sigma > 0");
                for b in &mut bins {
                    *b += normal.sample(&mut rng);
                }
            }
            Projection::from_raw_unchecked(bins)
        })
        .collect();

    let truth =
        (0..count).map(|i| TruthRecord { angle: angles[i], shift: shifts[i], outlier_class: labels[i] }).collect();
    ProjectionSet::new(projections)?.with_truth(truth)?.with_noise_sigma(sigma)
}

/// Copy of `img` with `zeroed` uniformly chosen pixels set to 0.
fn damage(img: &Image, zeroed: usize, seed: RngSeed) -> Image {
    let mut px = img.pixels().to_vec();
    let n = px.len();
    let mut rng = seed.rng();
    for idx in rand::seq::index::sample(&mut rng, n, zeroed.min(n)) {
        px[idx] = 0.0;
    }
    Image::from_raw_unchecked(img.side(), px)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::phantom::random_phantom;
    use crate::radon::forward_project;

    fn object() -> Image {
        random_phantom(40, RngSeed(21))
    }

    #[test]
    fn clean_dataset_matches_forward_projection() {
        let img = object();
        let set = generate_dataset(&img, 25, &AngleDistribution::uniform(), &CorruptionConfig::default(), RngSeed(1))
            .unwrap();
        let truth = set.truth().unwrap();
        for (p, t) in set.projections().iter().zip(truth) {
            assert_eq!(t.shift, 0.0);
            assert_eq!(t.outlier_class, OutlierClass::None);
            assert_eq!(p, &forward_project(&img, t.angle));
        }
        assert_eq!(set.noise_sigma(), Some(0.0));
    }

    #[test]
    fn outlier_counts_are_exact() {
        let img = object();
        let cfg = CorruptionConfig {
            f1_pct: 10.0,
            f2_pct: 10.0,
            alien_images: vec![random_phantom(40, RngSeed(99))],
            ..Default::default()
        };
        let set = generate_dataset(&img, 2000, &AngleDistribution::uniform(), &cfg, RngSeed(2)).unwrap();
        let t = set.truth().unwrap();
        let c1 = t.iter().filter(|r| r.outlier_class == OutlierClass::Class1).count();
        let c2 = t.iter().filter(|r| r.outlier_class == OutlierClass::Class2).count();
        assert_eq!((c1, c2), (200, 200));
    }

    #[test]
    fn class2_projections_share_one_damaged_copy() {
        let img = object();
        let cfg = CorruptionConfig { f2_pct: 20.0, ..Default::default() };
        let seed = RngSeed(8);
        let set = generate_dataset(&img, 200, &AngleDistribution::uniform(), &cfg, seed).unwrap();
        let zeroed = round_pct(img.side() * img.side(), cfg.f3_pct);
        let copy = damage(&disk_mask(&img), zeroed, seed.derive(STREAM_DAMAGE));
        let t = set.truth().unwrap();
        let mut n = 0;
        for (p, r) in set.projections().iter().zip(t) {
            if r.outlier_class == OutlierClass::Class2 {
                assert_eq!(p, &forward_project(&copy, r.angle));
                n += 1;
            }
        }
        assert_eq!(n, 40);
    }

    #[test]
    fn invalid_configs_are_rejected() {
        let img = object();
        let d = AngleDistribution::uniform();
        assert!(generate_dataset(&img, 0, &d, &CorruptionConfig::default(), RngSeed(0)).is_err());
        let bad = CorruptionConfig { f1_pct: 60.0, f2_pct: 50.0, ..Default::default() };
        assert!(generate_dataset(&img, 10, &d, &bad, RngSeed(0)).is_err());
        let no_alien = CorruptionConfig { f1_pct: 5.0, ..Default::default() };
        assert!(generate_dataset(&img, 10, &d, &no_alien, RngSeed(0)).is_err());
        let far = CorruptionConfig { max_shift: 11.0, ..Default::default() };
        assert!(generate_dataset(&img, 10, &d, &far, RngSeed(0)).is_err());
    }

    #[test]
    fn degenerate_segment_pins_angles() {
        let d = AngleDistribution::new(vec![Segment { lo: PI / 4.0, hi: PI / 4.0 + 1e-9, weight: 1.0 }]).unwrap();
        for a in sample_angles(500, &d, RngSeed(3)) {
            assert!((a - PI / 4.0).abs() <= 1e-9);
        }
    }

    #[test]
    fn four_segment_leaves_gaps_empty() {
        let d = AngleDistribution::four_segment();
        let a = sample_angles(20000, &d, RngSeed(4));
        let gaps = [(1.0, 2.0), (3.0, 4.0), (6.0, 7.0), (8.0, 9.0)];
        for x in a {
            for (g0, g1) in gaps {
                assert!(!(x > g0 * PI / 9.0 && x < g1 * PI / 9.0), "sample {x} in a gap");
            }
        }
    }

    #[test]
    fn uniform_angles_pass_ks_test() {
        let mut a = sample_angles(20000, &AngleDistribution::uniform(), RngSeed(5));
        a.sort_by(f64::total_cmp);
        let n = a.len() as f64;
        let ks = a
            .iter()
            .enumerate()
            .map(|(i, &x)| {
                let cdf = x / PI;
                (cdf - i as f64 / n).abs().max(((i + 1) as f64 / n - cdf).abs())
            })
            .fold(0.0, f64::max);
        assert!(ks <= 0.02, "KS statistic {ks}");
    }

    #[test]
    fn distribution_parses_and_displays() {
        let d: AngleDistribution = "0:1:1,2:3:0.5".parse().unwrap();
        assert_eq!(d.segments().len(), 2);
        let again: AngleDistribution = d.to_string().parse().unwrap();
        assert_eq!(again, d);
        assert!("0:4:1".parse::<AngleDistribution>().is_err());
        assert!("0:1:0".parse::<AngleDistribution>().is_err());
        assert!("0:1".parse::<AngleDistribution>().is_err());
    }
}
