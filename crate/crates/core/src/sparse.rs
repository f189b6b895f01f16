//! Sparsity-regularized baseline: the image is `w = Uβ` with `U` the inverse
//! 2D DCT, and `Σ_i ‖unshift(q_i, s_i) − R_θi(Uβ)‖² + λ‖β‖₁` is minimized
//! alternately over `β` (iterative shrinkage with backtracking) and the poses
//! (the same grid search as [`crate::refine`]).

use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;

use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::radon::forward_project;
use crate::refine::{objective, objective_gradient, pose_step, PoseGrid, StepChange};
use crate::types::{Image, Pose, Projection};

/// Orthonormal 2D DCT-II on square images.
#[derive(Clone, Debug)]
pub struct Dct2 {
    c: DMatrix<f64>,
}

impl Dct2 {
    pub fn new(n: usize) -> Self {
        let c = DMatrix::from_fn(n, n, |k, i| {
            let a = if k == 0 { (1.0 / n as f64).sqrt() } else { (2.0 / n as f64).sqrt() };
            a * (PI * (2 * i + 1) as f64 * k as f64 / (2 * n) as f64).cos()
        });
        Dct2 { c }
    }

    pub fn side(&self) -> usize {
        self.c.nrows()
    }

    fn check(&self, len: usize) -> Result<()> {
        let n = self.side();
        if len != n * n {
            return Err(Error::invalid(format!("expected {} coefficients, got {len}", n * n)));
        }
        Ok(())
    }

    /// Coefficients `β = C W Cᵀ` of a row-major image.
    pub fn forward(&self, pixels: &[f64]) -> Result<Vec<f64>> {
        self.check(pixels.len())?;
        let n = self.side();
        let w = DMatrix::from_row_slice(n, n, pixels);
        let b = &self.c * w * self.c.transpose();
        Ok(b.transpose().as_slice().to_vec())
    }

    /// Image `W = Cᵀ β C`, row-major (the operator `U`).
    pub fn inverse(&self, coeffs: &[f64]) -> Result<Vec<f64>> {
        self.check(coeffs.len())?;
        let n = self.side();
        let b = DMatrix::from_row_slice(n, n, coeffs);
        let w = self.c.transpose() * b * &self.c;
        Ok(w.transpose().as_slice().to_vec())
    }
}

/// Soft thresholding: moves `c` toward zero by `min(|c|, t)`.
pub fn soft_threshold(c: f64, t: f64) -> f64 {
    if c > t {
        c - t
    } else if c < -t {
        c + t
    } else {
        0.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Lambda {
    Absolute(f64),
    /// Fraction of `‖2 Uᵀ Aᵀ q‖∞`, the smallest value for which `β = 0` is optimal.
    Relative(f64),
}

impl fmt::Display for Lambda {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Lambda::Absolute(v) => write!(f, "{v}"),
            Lambda::Relative(v) => write!(f, "{v}x"),
        }
    }
}

impl FromStr for Lambda {
    type Err = Error;

    /// `0.5` is absolute, `0.01x` is relative.
    fn from_str(s: &str) -> Result<Self> {
        let (num, rel) = match s.strip_suffix('x') {
            Some(n) => (n, true),
            None => (s, false),
        };
        let v: f64 = num.trim().parse().map_err(|_| Error::invalid(format!("bad lambda `{s}`")))?;
        if !(v >= 0.0 && v.is_finite()) {
            return Err(Error::invalid(format!("lambda {v} must be >= 0")));
        }
        Ok(if rel { Lambda::Relative(v) } else { Lambda::Absolute(v) })
    }
}

pub const DEFAULT_LAMBDA_FACTOR: f64 = 1e-3;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SparseConfig {
    pub lambda1: Lambda,
    pub inner_iters: usize,
    pub outer_iters: usize,
    pub grid: PoseGrid,
    /// Skip the pose update and only solve for `β`.
    pub fixed_poses: bool,
    pub tolerance: f64,
}

impl Default for SparseConfig {
    fn default() -> Self {
        SparseConfig {
            lambda1: Lambda::Relative(DEFAULT_LAMBDA_FACTOR),
            inner_iters: 40,
            outer_iters: 10,
            grid: PoseGrid::default(),
            fixed_poses: false,
            tolerance: 1e-6,
        }
    }
}

impl SparseConfig {
    pub fn validate(&self, len: usize) -> Result<()> {
        let v = match self.lambda1 {
            Lambda::Absolute(v) | Lambda::Relative(v) => v,
        };
        if !(v >= 0.0 && v.is_finite()) {
            return Err(Error::invalid(format!("lambda1 {v} must be >= 0")));
        }
        if self.inner_iters == 0 || self.outer_iters == 0 {
            return Err(Error::invalid("inner_iters and outer_iters must be >= 1"));
        }
        if !(self.tolerance >= 0.0) {
            return Err(Error::invalid("tolerance must be >= 0"));
        }
        self.grid.validate(len)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SparseResult {
    pub image: Image,
    pub coefficients: Vec<f64>,
    pub poses: Vec<Pose>,
    pub lambda1: f64,
    /// Composite objective after each outer iteration.
    pub objective_trace: Vec<f64>,
    /// Composite objective after every accepted shrinkage step, each outer
    /// iteration's sequence in order.
    pub beta_traces: Vec<Vec<f64>>,
    pub pose_steps: Vec<StepChange>,
}

struct Problem<'a> {
    dct: Dct2,
    projections: &'a [Projection],
    side: usize,
}

impl Problem<'_> {
    fn image(&self, beta: &[f64]) -> Result<Image> {
        Image::new(self.side, self.dct.inverse(beta)?)
    }

    fn data_term(&self, beta: &[f64], poses: &[Pose]) -> Result<f64> {
        objective(&self.image(beta)?, self.projections, poses)
    }

    fn gradient(&self, beta: &[f64], poses: &[Pose]) -> Result<Vec<f64>> {
        let g = objective_gradient(&self.image(beta)?, self.projections, poses)?;
        self.dct.forward(g.pixels())
    }

    /// Largest eigenvalue of the data-term Hessian, by power iteration.
    fn lipschitz(&self, poses: &[Pose]) -> Result<f64> {
        let zeros = vec![Projection::zeros(self.side); poses.len()];
        let mut v = Image::new(self.side, vec![1.0; self.side * self.side])?;
        let mut est = 0.0;
        for _ in 0..20 {
            let hv = objective_gradient(&v, &zeros, poses)?;
            let n = hv.norm();
            if n == 0.0 {
                return Ok(1.0);
            }
            est = n / v.norm();
            v = hv.map(|x| x / n)?;
        }
        Ok(est)
    }
}

fn l1(beta: &[f64]) -> f64 {
    beta.iter().map(|b| b.abs()).sum()
}

/// Runs `iters` shrinkage steps with backtracking; returns the composite
/// objective after each accepted step and the step size to reuse.
fn shrink_steps(
    prob: &Problem<'_>,
    beta: &mut Vec<f64>,
    poses: &[Pose],
    lambda: f64,
    mut step: f64,
    iters: usize,
) -> Result<(Vec<f64>, f64)> {
    let mut f = prob.data_term(beta, poses)?;
    let mut trace = Vec::with_capacity(iters);
    for _ in 0..iters {
        let g = prob.gradient(beta, poses)?;
        let mut accepted = false;
        for _ in 0..40 {
            let cand: Vec<f64> =
                beta.iter().zip(&g).map(|(b, gi)| soft_threshold(b - step * gi, step * lambda)).collect();
            let f_c = prob.data_term(&cand, poses)?;
            let lin: f64 = cand.iter().zip(beta.iter()).zip(&g).map(|((c, b), gi)| gi * (c - b)).sum();
            let quad: f64 = cand.iter().zip(beta.iter()).map(|(c, b)| (c - b).powi(2)).sum::<f64>() / (2.0 * step);
            if f_c <= f + lin + quad {
                let moved = quad > 0.0;
                *beta = cand;
                f = f_c;
                accepted = moved;
                break;
            }
            step *= 0.5;
        }
        trace.push(f + lambda * l1(beta));
        if !accepted {
            break;
        }
    }
    Ok((trace, step))
}

fn resolve_lambda(prob: &Problem<'_>, poses: &[Pose], rule: Lambda) -> Result<f64> {
    match rule {
        Lambda::Absolute(v) => Ok(v),
        Lambda::Relative(f) => {
            let zero = vec![0.0; prob.side * prob.side];
            let g = prob.gradient(&zero, poses)?;
            Ok(f * g.iter().fold(0.0f64, |m, x| m.max(x.abs())))
        }
    }
}

pub fn sparse_reconstruct(projections: &[Projection], init: &[Pose], cfg: &SparseConfig) -> Result<SparseResult> {
    let side = projections.first().map(|p| p.len()).ok_or_else(|| Error::invalid("no projections"))?;
    cfg.validate(side)?;
    if init.len() != projections.len() {
        return Err(Error::invalid(format!("{} initial poses for {} projections", init.len(), projections.len())));
    }
    let prob = Problem { dct: Dct2::new(side), projections, side };
    let mut poses = init.to_vec();
    let lambda = resolve_lambda(&prob, &poses, cfg.lambda1)?;
    let mut step = 1.0 / prob.lipschitz(&poses)?.max(f64::MIN_POSITIVE);
    let mut beta = vec![0.0; side * side];
    let mut objective_trace = Vec::new();
    let mut beta_traces = Vec::new();
    let mut pose_steps = Vec::new();

    for _ in 0..cfg.outer_iters {
        let (trace, s) = shrink_steps(&prob, &mut beta, &poses, lambda, step, cfg.inner_iters)?;
        step = s;
        beta_traces.push(trace);
        let mut value = prob.data_term(&beta, &poses)? + lambda * l1(&beta);
        if !cfg.fixed_poses {
            let ps = pose_step(&prob.image(&beta)?, projections, &poses, &cfg.grid)?;
            poses = ps.poses;
            pose_steps.push(ps.change);
            value = ps.change.after + lambda * l1(&beta);
        }
        let prev = objective_trace.last().copied();
        objective_trace.push(value);
        if let Some(prev) = prev {
            if prev - value < cfg.tolerance * prev {
                break;
            }
        }
    }
    let image = crate::radon::disk_mask(&prob.image(&beta)?);
    Ok(SparseResult { image, coefficients: beta, poses, lambda1: lambda, objective_trace, beta_traces, pose_steps })
}

/// Picks the relative `λ` factor with the lowest relative RMSE on noiseless
/// projections of `held_out` at known poses. Returns the factor and the RMSE
/// of every candidate.
pub fn tune_lambda1(
    held_out: &Image,
    poses: &[Pose],
    factors: &[f64],
    cfg: &SparseConfig,
) -> Result<(f64, Vec<(f64, f64)>)> {
    if factors.is_empty() {
        return Err(Error::invalid("no lambda candidates"));
    }
    let projections: Vec<Projection> = poses
        .iter()
        .map(|p| crate::radon::shift_projection(&forward_project(held_out, p.angle), p.shift))
        .collect::<Result<_>>()?;
    let truth = crate::radon::disk_mask(held_out);
    let norm = truth.norm();
    let mut scores = Vec::with_capacity(factors.len());
    for &f in factors {
        let run = SparseConfig { lambda1: Lambda::Relative(f), fixed_poses: true, outer_iters: 1, ..*cfg };
        let out = sparse_reconstruct(&projections, poses, &run)?;
        let err: f64 = out.image.pixels().iter().zip(truth.pixels()).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
        scores.push((f, if norm > 0.0 { err / norm } else { err }));
    }
    let best = scores.iter().fold(scores[0], |b, s| if s.1 < b.1 { *s } else { b });
    Ok((best.0, scores))
}

/// Candidate factors `10^-3 .. 10^1`, one per decade.
pub fn lambda_grid() -> Vec<f64> {
    (-3..=1).map(|e| 10f64.powi(e)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::phantom::random_phantom;
    use crate::types::RngSeed;
    use rand::Rng;

    #[test]
    fn dct_is_orthonormal() {
        let d = Dct2::new(12);
        let mut rng = RngSeed(2).rng();
        let beta: Vec<f64> = (0..144).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let w = d.inverse(&beta).unwrap();
        let nb: f64 = beta.iter().map(|x| x * x).sum::<f64>().sqrt();
        let nw: f64 = w.iter().map(|x| x * x).sum::<f64>().sqrt();
        assert!((nb - nw).abs() < 1e-10);
        let back = d.forward(&w).unwrap();
        for (a, b) in back.iter().zip(&beta) {
            assert!((a - b).abs() < 1e-12);
        }
        let flat = d.forward(&vec![1.0; 144]).unwrap();
        assert!((flat[0] - 12.0).abs() < 1e-12);
        assert!(flat[1..].iter().all(|x| x.abs() < 1e-12));
    }

    #[test]
    fn soft_threshold_moves_by_min_of_magnitude_and_threshold() {
        for (c, t) in [(3.0, 1.0), (-3.0, 1.0), (0.5, 1.0), (-0.2, 0.3), (2.0, 0.0)] {
            let out: f64 = soft_threshold(c, t);
            assert!((c.abs() - out.abs() - c.abs().min(t)).abs() < 1e-15);
            assert!(out == 0.0 || out.signum() == c.signum());
        }
    }

    #[test]
    fn lambda_parses() {
        assert_eq!("0.5".parse::<Lambda>().unwrap(), Lambda::Absolute(0.5));
        assert_eq!("0.01x".parse::<Lambda>().unwrap(), Lambda::Relative(0.01));
        assert!("-1".parse::<Lambda>().is_err());
        assert_eq!(Lambda::Relative(0.01).to_string(), "0.01x");
    }

    #[test]
    fn huge_lambda_gives_zero_image() {
        let w = random_phantom(16, RngSeed(5));
        let poses: Vec<Pose> = (0..12).map(|i| Pose::new(i as f64 * 0.26, 0.0).unwrap()).collect();
        let ps: Vec<Projection> = poses.iter().map(|p| forward_project(&w, p.angle)).collect();
        let cfg =
            SparseConfig { lambda1: Lambda::Relative(1.0), inner_iters: 5, fixed_poses: true, ..Default::default() };
        let out = sparse_reconstruct(&ps, &poses, &cfg).unwrap();
        assert!(out.coefficients.iter().all(|&b| b == 0.0));
        assert!(out.image.pixels().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn shrinkage_trace_is_monotone() {
        let w = random_phantom(16, RngSeed(6));
        let poses: Vec<Pose> = (0..12).map(|i| Pose::new(i as f64 * 0.26, 0.0).unwrap()).collect();
        let ps: Vec<Projection> = poses.iter().map(|p| forward_project(&w, p.angle)).collect();
        let cfg = SparseConfig {
            lambda1: Lambda::Relative(0.01),
            inner_iters: 30,
            outer_iters: 2,
            grid: PoseGrid { angle_step_deg: 5.0, max_shift: 0.0, ..Default::default() },
            ..Default::default()
        };
        let out = sparse_reconstruct(&ps, &poses, &cfg).unwrap();
        let all: Vec<f64> = out.beta_traces.iter().flatten().copied().collect();
        assert!(all.len() > 10);
        for pair in all.windows(2) {
            assert!(pair[1] <= pair[0] * (1.0 + 1e-12), "{pair:?}");
        }
    }
}
