//! Patch-based PCA denoising of 1D projections.
//!
//! All overlapping patches of one projection are collected, centered on the
//! mean patch and expressed in the eigenbasis of their covariance. Each
//! principal coefficient is shrunk using the known per-bin noise level, the
//! patches are rebuilt and overlapping estimates are averaged.

use std::str::FromStr;

use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::error::{Error, Result};
use crate::types::Projection;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Shrink {
    /// `c <- c * l / (l + sd^2)` with `l = max(var - sd^2, 0)`.
    Wiener,
    /// Drop components whose variance does not exceed `sd^2`.
    HardThreshold,
}

impl FromStr for Shrink {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "wiener" => Ok(Shrink::Wiener),
            "hard" | "hard_threshold" | "hard-threshold" => Ok(Shrink::HardThreshold),
            other => Err(Error::invalid(format!("unknown shrinkage `{other}`"))),
        }
    }
}

impl std::fmt::Display for Shrink {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Shrink::Wiener => "wiener",
            Shrink::HardThreshold => "hard_threshold",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DenoiseConfig {
    pub patch_len: usize,
    pub stride: usize,
    /// Per-bin noise standard deviation of the input.
    pub noise_sd: f64,
    pub shrink: Shrink,
}

impl Default for DenoiseConfig {
    fn default() -> Self {
        DenoiseConfig { patch_len: 7, stride: 1, noise_sd: 0.0, shrink: Shrink::Wiener }
    }
}

const HARD_THRESHOLD_FACTOR: f64 = 1.0;

impl DenoiseConfig {
    pub fn validate(&self, len: usize) -> Result<()> {
        if self.patch_len == 0 || self.patch_len.is_multiple_of(2) {
            return Err(Error::invalid(format!("patch length {} must be odd", self.patch_len)));
        }
        if self.patch_len > len / 2 {
            return Err(Error::invalid(format!(
                "patch length {} exceeds half the projection length {len}",
                self.patch_len
            )));
        }
        if self.stride == 0 || self.stride > self.patch_len {
            return Err(Error::invalid(format!("stride {} must lie in [1, patch_len]", self.stride)));
        }
        if !(self.noise_sd.is_finite() && self.noise_sd >= 0.0) {
            return Err(Error::invalid(format!("noise_sd {} must be >= 0", self.noise_sd)));
        }
        Ok(())
    }
}

/// Noise level of the mean of `cluster_size` i.i.d. samples.
pub fn effective_sigma(sigma: f64, cluster_size: usize) -> Result<f64> {
    if cluster_size == 0 {
        return Err(Error::invalid("cluster size must be >= 1"));
    }
    Ok(sigma / (cluster_size as f64).sqrt())
}

fn patch_starts(len: usize, patch: usize, stride: usize) -> Vec<usize> {
    let last = len - patch;
    let mut starts: Vec<usize> = (0..=last).step_by(stride).collect();
    if *starts.last().expect("len >= patch") != last {
        starts.push(last);
    }
    starts
}

pub fn denoise_projection(p: &Projection, cfg: &DenoiseConfig) -> Result<Projection> {
    let len = p.len();
    cfg.validate(len)?;
    let x = p.bins();
    let k = cfg.patch_len;
    let starts = patch_starts(len, k, cfg.stride);
    let n = starts.len();

    let mut mean = DVector::<f64>::zeros(k);
    for &s in &starts {
        for d in 0..k {
            mean[d] += x[s + d];
        }
    }
    mean /= n as f64;

    let centered = DMatrix::<f64>::from_fn(n, k, |i, d| x[starts[i] + d] - mean[d]);
    let cov = centered.transpose() * &centered / n as f64;
    let eig = SymmetricEigen::new(cov);
    let noise_var = cfg.noise_sd * cfg.noise_sd;
    let gains = DVector::<f64>::from_iterator(
        k,
        eig.eigenvalues.iter().map(|&var| match cfg.shrink {
            Shrink::Wiener => {
                let signal = (var - noise_var).max(0.0);
                if signal + noise_var > 0.0 {
                    signal / (signal + noise_var)
                } else {
                    1.0
                }
            }
            Shrink::HardThreshold => {
                if var > noise_var * HARD_THRESHOLD_FACTOR || noise_var == 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
        }),
    );

    // rebuild: patches = mean + (C E) diag(g) E^T
    let basis = &eig.eigenvectors;
    let coeffs = &centered * basis;
    let shrunk = DMatrix::<f64>::from_fn(n, k, |i, j| coeffs[(i, j)] * gains[j]);
    let rebuilt = shrunk * basis.transpose();

    let mut acc = vec![0.0; len];
    let mut weight = vec![0.0; len];
    for (i, &s) in starts.iter().enumerate() {
        for d in 0..k {
            acc[s + d] += rebuilt[(i, d)] + mean[d];
            weight[s + d] += 1.0;
        }
    }
    let out = acc.iter().zip(&weight).map(|(a, w)| a / w).collect();
    Projection::new(out)
}

/// Output for infinite noise: every patch replaced by the mean patch.
pub fn dc_reconstruction(p: &Projection, cfg: &DenoiseConfig) -> Result<Projection> {
    let cfg = DenoiseConfig { noise_sd: f64::MAX.sqrt() / 2.0, shrink: Shrink::HardThreshold, ..*cfg };
    denoise_projection(p, &cfg)
}
