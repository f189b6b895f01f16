//! Alternating refinement of the image and the per-projection poses.
//!
//! The objective is `M = Σ_i ‖unshift(q_i, s_i) − R_θi(w)‖²`. The image step
//! either recomputes a filtered backprojection at the current poses, kept only
//! when it lowers `M`, or takes a line-searched gradient step on `M`. The pose step is a brute-force search
//! over an angle/shift grid, independently for every projection, that always
//! includes the incumbent pose.

use std::f64::consts::PI;
use std::str::FromStr;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::hlcc::{golden_min, shift_grid};
use crate::radon::{apply_mask, backproject_into, fbp_reconstruct, shift_into, FbpFilter, Projector};
use crate::types::{Image, Pose, Projection};

/// Projections per partial sum when accumulating backprojections; fixed so the
/// reduction order does not depend on the thread count.
const CHUNK: usize = 16;

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum ImageStep {
    FbpRestart,
    /// Gradient descent with backtracking from the given initial step.
    Gradient {
        step: f64,
    },
}

impl FromStr for ImageStep {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "fbp" | "fbp_restart" => Ok(ImageStep::FbpRestart),
            "grad" | "gradient" => Ok(ImageStep::Gradient { step: DEFAULT_GRADIENT_STEP }),
            other => Err(Error::invalid(format!("unknown image step `{other}`"))),
        }
    }
}

pub const DEFAULT_GRADIENT_STEP: f64 = 1e-3;
pub const DEFAULT_FBP_CORRECTIONS: usize = 4;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SearchMode {
    /// Joint grid unless it exceeds [`JOINT_LIMIT`] evaluations per projection.
    Auto,
    Joint,
    /// Angle first at the incumbent shift, then shift at the chosen angle.
    Separable,
}

impl FromStr for SearchMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "auto" => Ok(SearchMode::Auto),
            "joint" => Ok(SearchMode::Joint),
            "separable" => Ok(SearchMode::Separable),
            other => Err(Error::invalid(format!("unknown search mode `{other}`"))),
        }
    }
}

pub const JOINT_LIMIT: usize = 1_000_000;

/// Angle/shift grid of the pose step.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PoseGrid {
    pub angle_step_deg: f64,
    pub shift_step: f64,
    pub max_shift: f64,
    pub mode: SearchMode,
    /// Golden-section iterations refining the best grid pose locally, first
    /// in angle then in shift; 0 disables.
    pub polish_iters: usize,
}

impl Default for PoseGrid {
    fn default() -> Self {
        PoseGrid { angle_step_deg: 0.5, shift_step: 0.25, max_shift: 2.0, mode: SearchMode::Auto, polish_iters: 12 }
    }
}

impl PoseGrid {
    pub fn validate(&self, len: usize) -> Result<()> {
        if !(self.angle_step_deg > 0.0 && self.angle_step_deg <= 180.0) {
            return Err(Error::invalid(format!("angle step {} deg must lie in (0, 180]", self.angle_step_deg)));
        }
        if !(self.shift_step > 0.0 && self.shift_step.is_finite()) {
            return Err(Error::invalid(format!("shift step {} must be > 0", self.shift_step)));
        }
        let bound = len as f64 / 4.0;
        if !(self.max_shift >= 0.0 && self.max_shift <= bound) {
            return Err(Error::invalid(format!("max_shift {} must lie in [0, {bound}]", self.max_shift)));
        }
        Ok(())
    }

    pub fn angles(&self) -> Vec<f64> {
        let step = self.angle_step_deg.to_radians();
        (0..).map(|i| i as f64 * step).take_while(|&a| a < PI).collect()
    }

    pub fn shifts(&self) -> Vec<f64> {
        shift_grid(self.max_shift, self.shift_step)
    }

    fn joint(&self) -> bool {
        match self.mode {
            SearchMode::Joint => true,
            SearchMode::Separable => false,
            SearchMode::Auto => self.angles().len() * self.shifts().len() < JOINT_LIMIT,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RefineConfig {
    pub outer_iters: usize,
    pub grid: PoseGrid,
    pub image_step: ImageStep,
    pub nonneg_clamp: bool,
    pub filter: FbpFilter,
    /// Residual FBP corrections applied after each FBP restart.
    pub fbp_corrections: usize,
    /// Relative objective decrease per iteration below which refinement stops.
    pub tolerance: f64,
}

impl Default for RefineConfig {
    fn default() -> Self {
        RefineConfig {
            outer_iters: 30,
            grid: PoseGrid::default(),
            image_step: ImageStep::FbpRestart,
            nonneg_clamp: true,
            filter: FbpFilter::default(),
            fbp_corrections: DEFAULT_FBP_CORRECTIONS,
            tolerance: 1e-6,
        }
    }
}

impl RefineConfig {
    pub fn validate(&self, len: usize) -> Result<()> {
        if self.outer_iters == 0 {
            return Err(Error::invalid("outer_iters must be >= 1"));
        }
        if let ImageStep::Gradient { step } = self.image_step {
            if !(step > 0.0 && step.is_finite()) {
                return Err(Error::invalid(format!("gradient step {step} must be > 0")));
            }
        }
        if !(self.tolerance >= 0.0) {
            return Err(Error::invalid("tolerance must be >= 0"));
        }
        self.filter.validate()?;
        self.grid.validate(len)
    }
}

/// Objective before and after one pose step.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepChange {
    pub before: f64,
    pub after: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Refinement {
    pub image: Image,
    pub poses: Vec<Pose>,
    /// Objective after each outer iteration's pose step.
    pub objective_trace: Vec<f64>,
    pub pose_steps: Vec<StepChange>,
    /// Objective of the returned image and poses.
    pub final_objective: f64,
}

fn unshifted(q: &Projection, shift: f64) -> Vec<f64> {
    let mut out = vec![0.0; q.len()];
    shift_into(q.bins(), -shift, &mut out);
    out
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn check_shapes(w: &Image, projections: &[Projection], poses: &[Pose]) -> Result<()> {
    if projections.len() != poses.len() {
        return Err(Error::invalid(format!("{} poses for {} projections", poses.len(), projections.len())));
    }
    if let Some(p) = projections.iter().find(|p| p.len() != w.side()) {
        return Err(Error::invalid(format!("projection has {} bins, image side is {}", p.len(), w.side())));
    }
    let bound = w.side() as f64 / 4.0;
    if let Some(p) = poses.iter().find(|p| p.shift.abs() > bound) {
        return Err(Error::invalid(format!("pose shift {} exceeds bound {bound}", p.shift)));
    }
    Ok(())
}

/// One summand of the objective: `q` with its pose shift undone against `R_angle(w)`.
pub fn pose_objective(w: &Image, q: &Projection, angle: f64, shift: f64) -> Result<f64> {
    check_shapes(w, std::slice::from_ref(q), &[Pose::new(angle, shift)?])?;
    let r = Projector::new(w).project(angle);
    Ok(sq_dist(&unshifted(q, shift), r.bins()))
}

pub fn objective(w: &Image, projections: &[Projection], poses: &[Pose]) -> Result<f64> {
    check_shapes(w, projections, poses)?;
    let proj = Projector::new(w);
    let terms: Vec<f64> = projections
        .par_iter()
        .zip(poses)
        .map(|(q, pose)| sq_dist(&unshifted(q, pose.shift), proj.project(pose.angle).bins()))
        .collect();
    Ok(terms.iter().sum())
}

/// Gradient of the objective with respect to the (masked) image:
/// `2 Σ R_θᵀ (R_θ w − unshift(q))`.
pub fn objective_gradient(w: &Image, projections: &[Projection], poses: &[Pose]) -> Result<Image> {
    check_shapes(w, projections, poses)?;
    let side = w.side();
    let proj = Projector::new(w);
    let pairs: Vec<(&Projection, &Pose)> = projections.iter().zip(poses).collect();
    let partials: Vec<Vec<f64>> = pairs
        .par_chunks(CHUNK)
        .map(|chunk| {
            let mut acc = vec![0.0; side * side];
            for (q, pose) in chunk {
                let target = unshifted(q, pose.shift);
                let mut resid = proj.project(pose.angle).into_bins();
                for (r, t) in resid.iter_mut().zip(&target) {
                    *r = 2.0 * (*r - t);
                }
                backproject_into(&resid, pose.angle, side, &mut acc);
            }
            acc
        })
        .collect();
    let mut total = vec![0.0; side * side];
    for part in partials {
        for (t, p) in total.iter_mut().zip(part) {
            *t += p;
        }
    }
    apply_mask(side, &mut total);
    Image::new(side, total)
}

/// Result of one pose step.
#[derive(Clone, Debug, PartialEq)]
pub struct PoseStep {
    pub poses: Vec<Pose>,
    pub change: StepChange,
}

/// Brute-force pose search for every projection against the image `w`.
///
/// Each projection keeps its incumbent pose unless a grid pose is strictly
/// better, so the objective never increases.
pub fn pose_step(w: &Image, projections: &[Projection], poses: &[Pose], grid: &PoseGrid) -> Result<PoseStep> {
    check_shapes(w, projections, poses)?;
    grid.validate(w.side())?;
    let angles = grid.angles();
    let shifts = grid.shifts();
    let proj = Projector::new(w);
    let table: Vec<Vec<f64>> = angles.par_iter().map(|&a| proj.project(a).into_bins()).collect();
    let joint = grid.joint();

    let results: Vec<(Pose, f64, f64)> = projections
        .par_iter()
        .zip(poses)
        .map(|(q, &inc)| {
            let exact = proj.project(inc.angle).into_bins();
            let base = unshifted(q, inc.shift);
            let f_inc = sq_dist(&base, &exact);
            let (mut best, mut f_best) = ((inc.angle, inc.shift), f_inc);
            let mut buf = vec![0.0; q.len()];
            if joint {
                for &s in &shifts {
                    shift_into(q.bins(), -s, &mut buf);
                    for (a, r) in angles.iter().zip(&table) {
                        let f = sq_dist(&buf, r);
                        if f < f_best {
                            best = (*a, s);
                            f_best = f;
                        }
                    }
                }
            } else {
                for (a, r) in angles.iter().zip(&table) {
                    let f = sq_dist(&base, r);
                    if f < f_best {
                        best = (*a, inc.shift);
                        f_best = f;
                    }
                }
                let reference: &[f64] = match angles.iter().position(|&a| a == best.0) {
                    Some(i) if best.0 != inc.angle => &table[i],
                    _ => &exact,
                };
                let mut best_shift = (best.1, f_best);
                for &s in &shifts {
                    shift_into(q.bins(), -s, &mut buf);
                    let f = sq_dist(&buf, reference);
                    if f < best_shift.1 {
                        best_shift = (s, f);
                    }
                }
                best.1 = best_shift.0;
                f_best = best_shift.1;
            }
            if grid.polish_iters > 0 {
                let step = grid.angle_step_deg.to_radians();
                let (lo, hi) = ((best.0 - step).max(0.0), (best.0 + step).min(PI - 1e-12));
                shift_into(q.bins(), -best.1, &mut buf);
                let (a, f) = golden_min(lo, hi, grid.polish_iters, |a| sq_dist(&buf, proj.project(a).bins()));
                if f < f_best {
                    best.0 = a;
                    f_best = f;
                }
                if grid.max_shift > 0.0 {
                    let r = proj.project(best.0).into_bins();
                    let lo = (best.1 - grid.shift_step).max(-grid.max_shift);
                    let hi = (best.1 + grid.shift_step).min(grid.max_shift);
                    let (s, f) = golden_min(lo, hi, grid.polish_iters, |s| {
                        shift_into(q.bins(), -s, &mut buf);
                        sq_dist(&buf, &r)
                    });
                    if f < f_best {
                        best.1 = s;
                        f_best = f;
                    }
                }
            }
            (Pose { angle: best.0, shift: best.1 }, f_inc, f_best)
        })
        .collect();

    let before = results.iter().map(|r| r.1).sum();
    let after = results.iter().map(|r| r.2).sum();
    Ok(PoseStep { poses: results.into_iter().map(|r| r.0).collect(), change: StepChange { before, after } })
}

fn clamp(img: Image, on: bool) -> Image {
    if on {
        img.map(|v| v.max(0.0)).expect("clamping keeps pixels finite")
    } else {
        img
    }
}

/// FBP at the given poses followed by `corrections` steps
/// `w <- w + FBP(unshift(q) - R w)`.
pub fn fbp_image(
    projections: &[Projection],
    poses: &[Pose],
    filter: &FbpFilter,
    corrections: usize,
    nonneg: bool,
) -> Result<Image> {
    let side = projections.first().map(|p| p.len()).ok_or_else(|| Error::invalid("no projections"))?;
    let mut w = clamp(fbp_reconstruct(projections, poses, filter, side)?, nonneg);
    if corrections == 0 {
        return Ok(w);
    }
    let unshifted_poses: Vec<Pose> = poses.iter().map(|p| Pose { angle: p.angle, shift: 0.0 }).collect();
    for _ in 0..corrections {
        let proj = Projector::new(&w);
        let residuals: Vec<Projection> = projections
            .par_iter()
            .zip(poses)
            .map(|(q, pose)| {
                let mut r = unshifted(q, pose.shift);
                proj.project_into_sub(pose.angle, &mut r);
                Projection::from_raw_unchecked(r)
            })
            .collect();
        let delta = fbp_reconstruct(&residuals, &unshifted_poses, filter, side)?;
        let px = w.pixels().iter().zip(delta.pixels()).map(|(a, b)| a + b).collect();
        w = clamp(Image::new(side, px)?, nonneg);
    }
    Ok(w)
}

const MAX_BACKTRACKS: usize = 30;

/// Backtracking gradient step; returns the new image, its objective and the
/// accepted step (0 when no step decreased the objective).
fn gradient_step(
    w: &Image,
    f_w: f64,
    projections: &[Projection],
    poses: &[Pose],
    step: f64,
    nonneg: bool,
) -> Result<(Image, f64, f64)> {
    let g = objective_gradient(w, projections, poses)?;
    let mut t = step;
    for _ in 0..MAX_BACKTRACKS {
        let px = w.pixels().iter().zip(g.pixels()).map(|(a, b)| a - t * b).collect();
        let cand = clamp(Image::new(w.side(), px)?, nonneg);
        let f = objective(&cand, projections, poses)?;
        if f < f_w {
            return Ok((cand, f, t));
        }
        t *= 0.5;
    }
    Ok((w.clone(), f_w, 0.0))
}

pub fn refine(projections: &[Projection], init: &[Pose], cfg: &RefineConfig) -> Result<Refinement> {
    let side = projections.first().map(|p| p.len()).ok_or_else(|| Error::invalid("no projections to refine"))?;
    cfg.validate(side)?;
    if init.len() != projections.len() {
        return Err(Error::invalid(format!("{} initial poses for {} projections", init.len(), projections.len())));
    }
    let mut poses = init.to_vec();
    let fbp = |poses: &[Pose]| fbp_image(projections, poses, &cfg.filter, cfg.fbp_corrections, cfg.nonneg_clamp);
    let mut w = fbp(&poses)?;
    let mut f_w = 0.0;
    let mut step = match cfg.image_step {
        ImageStep::Gradient { step } => step,
        ImageStep::FbpRestart => 0.0,
    };
    let mut trace = Vec::new();
    let mut pose_steps = Vec::new();

    for it in 0..cfg.outer_iters {
        if it > 0 {
            match cfg.image_step {
                ImageStep::FbpRestart => {
                    // keep the previous image unless the restart fits better
                    let cand = fbp(&poses)?;
                    if objective(&cand, projections, &poses)? < f_w {
                        w = cand;
                    }
                }
                ImageStep::Gradient { .. } => {
                    let (next, _, t) = gradient_step(&w, f_w, projections, &poses, step, cfg.nonneg_clamp)?;
                    w = next;
                    if t > 0.0 {
                        step = 2.0 * t;
                    }
                }
            }
        }
        let ps = pose_step(&w, projections, &poses, &cfg.grid)?;
        debug_assert!(ps.change.after <= ps.change.before);
        poses = ps.poses;
        f_w = ps.change.after;
        pose_steps.push(ps.change);
        let prev = trace.last().copied();
        trace.push(f_w);
        if let Some(prev) = prev {
            if prev - f_w < cfg.tolerance * prev {
                break;
            }
        }
    }

    // final image at the final poses
    let (final_image, final_objective) = match cfg.image_step {
        ImageStep::FbpRestart => {
            let cand = fbp(&poses)?;
            let f = objective(&cand, projections, &poses)?;
            if f < f_w {
                (cand, f)
            } else {
                (w, f_w)
            }
        }
        ImageStep::Gradient { .. } => {
            let (img, f, _) = gradient_step(&w, f_w, projections, &poses, step, cfg.nonneg_clamp)?;
            (img, f)
        }
    };
    Ok(Refinement { image: final_image, poses, objective_trace: trace, pose_steps, final_objective })
}
