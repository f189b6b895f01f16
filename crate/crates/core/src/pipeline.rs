//! End-to-end orchestration with per-stage persistence.
//!
//! Every stage writes its artifacts to its own directory under the output
//! directory, together with a `stage.key` file holding a SHA-256 digest of the
//! stage's configuration and the key of its input. A later run whose key
//! matches reloads the artifacts instead of recomputing them.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use rayon::prelude::*;
use sha2::{Digest, Sha256};

use crate::cluster::{self, Assignment, ClusterAverages, Clustering, Seeding};
use crate::denoise::{self, DenoiseConfig, Shrink};
use crate::error::{Error, Result};
use crate::hlcc::{self, HlccConfig};
use crate::io;
use crate::metrics::{self, RegistrationResult};
use crate::phantom;
use crate::radon::{disk_mask, FilterKind};
use crate::refine::{self, ImageStep, PoseGrid, RefineConfig, SearchMode};
use crate::sparse::{self, Lambda, SparseConfig};
use crate::synth::{self, AngleDistribution, CorruptionConfig};
use crate::types::{canonicalize_angle, Image, OutlierClass, Pose, Projection, ProjectionSet, RngSeed};

const STREAM_SYNTH: u64 = 1;
const STREAM_CLUSTER: u64 = 2;
const STREAM_HLCC: u64 = 3;
const STREAM_ALIENS: u64 = 4;

const KEY_FILE: &str = "stage.key";

/// Where the object image comes from.
#[derive(Clone, Debug, PartialEq)]
pub enum ImageSource {
    File(PathBuf),
    SheppLogan,
    Random(u64),
}

impl FromStr for ImageSource {
    type Err = Error;

    /// `phantom:shepp-logan`, `phantom:random:<seed>` or a file path.
    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        if s.is_empty() {
            return Err(Error::invalid("empty image source"));
        }
        match s.strip_prefix("phantom:") {
            Some("shepp-logan") => Ok(ImageSource::SheppLogan),
            Some(rest) => match rest.strip_prefix("random:") {
                Some(seed) => seed
                    .parse()
                    .map(ImageSource::Random)
                    .map_err(|_| Error::invalid(format!("bad phantom seed `{seed}`"))),
                None => Err(Error::invalid(format!("unknown phantom `{rest}`"))),
            },
            None => Ok(ImageSource::File(PathBuf::from(s))),
        }
    }
}

impl fmt::Display for ImageSource {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ImageSource::File(p) => write!(f, "{}", p.display()),
            ImageSource::SheppLogan => f.write_str("phantom:shepp-logan"),
            ImageSource::Random(s) => write!(f, "phantom:random:{s}"),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub enum Stage {
    Synth,
    Cluster,
    Average,
    Denoise,
    InitPoses,
    Refine,
    Sparse,
    Evaluate,
}

impl Stage {
    pub const ALL: [Stage; 8] = [
        Stage::Synth,
        Stage::Cluster,
        Stage::Average,
        Stage::Denoise,
        Stage::InitPoses,
        Stage::Refine,
        Stage::Sparse,
        Stage::Evaluate,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Stage::Synth => "synth",
            Stage::Cluster => "cluster",
            Stage::Average => "average",
            Stage::Denoise => "denoise",
            Stage::InitPoses => "init-poses",
            Stage::Refine => "refine",
            Stage::Sparse => "sparse",
            Stage::Evaluate => "evaluate",
        }
    }

    /// Directory of the stage's artifacts inside the output directory.
    pub fn dir_name(self) -> String {
        let idx = Stage::ALL.iter().position(|s| *s == self).expect("listed");
        format!("{}-{}", idx + 1, self.name())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PipelineConfig {
    pub image: ImageSource,
    /// Side of generated phantoms; ignored for file images.
    pub side: usize,
    pub count: usize,
    pub dist: AngleDistribution,
    pub noise_pct: f64,
    pub f1_pct: f64,
    pub f2_pct: f64,
    pub f3_pct: f64,
    /// Shared by the generator, the initializer and the refinement grid.
    pub max_shift: f64,
    /// Number of random phantoms used as class-1 sources.
    pub aliens: usize,
    /// Cluster count; `None` means `count / 100`.
    pub k_c: Option<usize>,
    pub kmeans_iters: usize,
    pub seeding: Seeding,
    /// Percentage of projections discarded after clustering.
    pub discard_pct: f64,
    pub denoise_enabled: bool,
    /// `noise_sd` is set per cluster at run time.
    pub denoise: DenoiseConfig,
    /// Per-bin noise σ of the raw projections; `None` takes the generator's.
    pub sigma: Option<f64>,
    pub hlcc: HlccConfig,
    pub refine: RefineConfig,
    pub sparse_enabled: bool,
    pub sparse: SparseConfig,
    pub seed: u64,
    pub out: PathBuf,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            image: ImageSource::SheppLogan,
            side: 100,
            count: 20_000,
            dist: AngleDistribution::uniform(),
            noise_pct: 0.0,
            f1_pct: 0.0,
            f2_pct: 0.0,
            f3_pct: CorruptionConfig::default().f3_pct,
            max_shift: 0.0,
            aliens: 100,
            k_c: None,
            kmeans_iters: 50,
            seeding: Seeding::default(),
            discard_pct: 0.0,
            denoise_enabled: true,
            sigma: None,
            denoise: DenoiseConfig::default(),
            hlcc: HlccConfig { max_shift: 0.0, ..HlccConfig::default() },
            refine: RefineConfig {
                grid: PoseGrid { max_shift: 0.0, ..PoseGrid::default() },
                ..RefineConfig::default()
            },
            sparse_enabled: false,
            sparse: SparseConfig {
                grid: PoseGrid { max_shift: 0.0, ..PoseGrid::default() },
                ..SparseConfig::default()
            },
            seed: 0,
            out: PathBuf::from("out"),
        }
    }
}

fn parse<T: FromStr>(key: &str, v: &str) -> Result<T> {
    v.trim().parse().map_err(|_| Error::invalid(format!("bad value `{v}` for `{key}`")))
}

fn parse_bool(key: &str, v: &str) -> Result<bool> {
    match v.trim() {
        "true" | "on" | "yes" | "1" => Ok(true),
        "false" | "off" | "no" | "0" => Ok(false),
        _ => Err(Error::invalid(format!("bad flag `{v}` for `{key}`"))),
    }
}

fn filter_name(k: FilterKind) -> &'static str {
    match k {
        FilterKind::RamLak => "ram_lak",
        FilterKind::SheppLogan => "shepp_logan",
    }
}

fn mode_name(m: SearchMode) -> &'static str {
    match m {
        SearchMode::Auto => "auto",
        SearchMode::Joint => "joint",
        SearchMode::Separable => "separable",
    }
}

fn image_step_name(s: ImageStep) -> String {
    match s {
        ImageStep::FbpRestart => "fbp".into(),
        ImageStep::Gradient { .. } => "grad".into(),
    }
}

impl PipelineConfig {
    /// Reads a key=value file on top of the defaults.
    pub fn from_file(path: &Path) -> Result<Self> {
        let mut cfg = PipelineConfig::default();
        for (k, v) in io::read_key_values(path)? {
            cfg.set(&k, &v)?;
        }
        Ok(cfg)
    }

    /// Sets one key. Unknown keys are rejected.
    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        match key {
            "image" => self.image = v.parse()?,
            "side" => self.side = parse(key, v)?,
            "count" => self.count = parse(key, v)?,
            "dist" => self.dist = v.parse()?,
            "noise_pct" => self.noise_pct = parse(key, v)?,
            "f1" => self.f1_pct = parse(key, v)?,
            "f2" => self.f2_pct = parse(key, v)?,
            "f3" => self.f3_pct = parse(key, v)?,
            "max_shift" => self.set_max_shift(parse(key, v)?),
            "aliens" => self.aliens = parse(key, v)?,
            "k_c" => {
                self.k_c = if v.trim() == "auto" { None } else { Some(parse(key, v)?) };
            }
            "kmeans_iters" => self.kmeans_iters = parse(key, v)?,
            "seeding" => self.seeding = v.trim().parse()?,
            "f" => self.discard_pct = parse(key, v)?,
            "denoise" => self.denoise_enabled = parse_bool(key, v)?,
            "patch_len" => self.denoise.patch_len = parse(key, v)?,
            "stride" => self.denoise.stride = parse(key, v)?,
            "shrink" => self.denoise.shrink = v.trim().parse::<Shrink>()?,
            "sigma" => {
                self.sigma = if v.trim() == "auto" { None } else { Some(parse(key, v)?) };
            }
            "order" => self.hlcc.order = parse(key, v)?,
            "restarts" => self.hlcc.restarts = parse(key, v)?,
            "hlcc_sweeps" => self.hlcc.max_sweeps = parse(key, v)?,
            "hlcc_tolerance" => self.hlcc.tolerance = parse(key, v)?,
            "hlcc_angle_step" => self.hlcc.angle_step = parse::<f64>(key, v)?.to_radians(),
            "hlcc_shift_step" => self.hlcc.shift_step = parse(key, v)?,
            "outer_iters" => self.refine.outer_iters = parse(key, v)?,
            "angle_step" => {
                let s = parse(key, v)?;
                self.refine.grid.angle_step_deg = s;
                self.sparse.grid.angle_step_deg = s;
            }
            "shift_step" => {
                let s = parse(key, v)?;
                self.refine.grid.shift_step = s;
                self.sparse.grid.shift_step = s;
            }
            "polish_iters" => {
                let n = parse(key, v)?;
                self.refine.grid.polish_iters = n;
                self.sparse.grid.polish_iters = n;
            }
            "search" => {
                let m = v.trim().parse::<SearchMode>()?;
                self.refine.grid.mode = m;
                self.sparse.grid.mode = m;
            }
            "image_step" => {
                let step = match self.refine.image_step {
                    ImageStep::Gradient { step } => step,
                    ImageStep::FbpRestart => refine::DEFAULT_GRADIENT_STEP,
                };
                self.refine.image_step = match v.trim().parse::<ImageStep>()? {
                    ImageStep::Gradient { .. } => ImageStep::Gradient { step },
                    s => s,
                };
            }
            "gradient_step" => {
                let step = parse(key, v)?;
                if let ImageStep::Gradient { step: s } = &mut self.refine.image_step {
                    *s = step;
                } else {
                    return Err(Error::invalid("gradient_step requires image_step=grad"));
                }
            }
            "fbp_corrections" => self.refine.fbp_corrections = parse(key, v)?,
            "nonneg_clamp" => self.refine.nonneg_clamp = parse_bool(key, v)?,
            "filter" => {
                self.refine.filter.kind = match v.trim() {
                    "ram_lak" | "ram-lak" => FilterKind::RamLak,
                    "shepp_logan" | "shepp-logan" => FilterKind::SheppLogan,
                    other => return Err(Error::invalid(format!("unknown filter `{other}`"))),
                }
            }
            "cutoff" => self.refine.filter.cutoff = parse(key, v)?,
            "refine_tolerance" => self.refine.tolerance = parse(key, v)?,
            "sparse" => self.sparse_enabled = parse_bool(key, v)?,
            "lambda1" => self.sparse.lambda1 = v.trim().parse::<Lambda>()?,
            "sparse_inner_iters" => self.sparse.inner_iters = parse(key, v)?,
            "sparse_outer_iters" => self.sparse.outer_iters = parse(key, v)?,
            "seed" => self.seed = parse(key, v)?,
            "out" => self.out = PathBuf::from(v.trim()),
            other => return Err(Error::invalid(format!("unknown config key `{other}`"))),
        }
        Ok(())
    }

    pub fn set_max_shift(&mut self, s: f64) {
        self.max_shift = s;
        self.hlcc.max_shift = s;
        self.refine.grid.max_shift = s;
        self.sparse.grid.max_shift = s;
    }

    pub fn effective_k(&self) -> usize {
        self.k_c.unwrap_or_else(|| cluster::default_k(self.count))
    }

    /// Checks everything that does not need the image or upstream results.
    pub fn validate(&self) -> Result<()> {
        if self.count == 0 {
            return Err(Error::invalid("count must be >= 1"));
        }
        if self.side < 8 {
            return Err(Error::invalid(format!("side {} must be >= 8", self.side)));
        }
        if !(0.0..100.0).contains(&self.discard_pct) {
            return Err(Error::invalid(format!("f = {} must lie in [0, 100)", self.discard_pct)));
        }
        let k = self.effective_k();
        if k == 0 || k > self.count {
            return Err(Error::invalid(format!("k_c = {k} must lie in [1, {}]", self.count)));
        }
        if let Some(sd) = self.sigma {
            if !(sd.is_finite() && sd >= 0.0) {
                return Err(Error::invalid(format!("sigma {sd} must be >= 0")));
            }
        }
        if self.f1_pct > 0.0 && self.aliens == 0 {
            return Err(Error::invalid("class-1 outliers need aliens >= 1"));
        }
        if self.max_shift != self.hlcc.max_shift
            || self.max_shift != self.refine.grid.max_shift
            || self.max_shift != self.sparse.grid.max_shift
        {
            return Err(Error::invalid("max_shift differs between stages"));
        }
        Ok(())
    }

    /// Checks the per-stage configs against the projection length.
    fn validate_for_len(&self, len: usize) -> Result<()> {
        if self.denoise_enabled {
            self.denoise.validate(len)?;
        }
        self.refine.validate(len)?;
        if self.sparse_enabled {
            self.sparse.validate(len)?;
        }
        Ok(())
    }

    fn synth_entries(&self) -> Vec<(&'static str, String)> {
        vec![
            ("image", self.image.to_string()),
            ("side", self.side.to_string()),
            ("count", self.count.to_string()),
            ("dist", self.dist.to_string()),
            ("noise_pct", self.noise_pct.to_string()),
            ("f1", self.f1_pct.to_string()),
            ("f2", self.f2_pct.to_string()),
            ("f3", self.f3_pct.to_string()),
            ("max_shift", self.max_shift.to_string()),
            ("aliens", self.aliens.to_string()),
        ]
    }

    fn cluster_entries(&self) -> Vec<(&'static str, String)> {
        vec![
            ("k_c", self.effective_k().to_string()),
            ("kmeans_iters", self.kmeans_iters.to_string()),
            ("seeding", self.seeding.to_string()),
            ("f", self.discard_pct.to_string()),
        ]
    }

    fn denoise_entries(&self) -> Vec<(&'static str, String)> {
        vec![
            ("denoise", self.denoise_enabled.to_string()),
            ("patch_len", self.denoise.patch_len.to_string()),
            ("stride", self.denoise.stride.to_string()),
            ("shrink", self.denoise.shrink.to_string()),
            ("sigma", self.sigma.map_or("auto".to_string(), |s| s.to_string())),
        ]
    }

    fn hlcc_entries(&self) -> Vec<(&'static str, String)> {
        vec![
            ("order", self.hlcc.order.to_string()),
            ("restarts", self.hlcc.restarts.to_string()),
            ("hlcc_sweeps", self.hlcc.max_sweeps.to_string()),
            ("hlcc_tolerance", self.hlcc.tolerance.to_string()),
            ("hlcc_angle_step", self.hlcc.angle_step.to_degrees().to_string()),
            ("hlcc_shift_step", self.hlcc.shift_step.to_string()),
        ]
    }

    fn grid_entries(&self) -> Vec<(&'static str, String)> {
        vec![
            ("angle_step", self.refine.grid.angle_step_deg.to_string()),
            ("shift_step", self.refine.grid.shift_step.to_string()),
            ("search", mode_name(self.refine.grid.mode).to_string()),
            ("polish_iters", self.refine.grid.polish_iters.to_string()),
        ]
    }

    fn refine_entries(&self) -> Vec<(&'static str, String)> {
        let mut e = vec![
            ("outer_iters", self.refine.outer_iters.to_string()),
            ("image_step", image_step_name(self.refine.image_step)),
        ];
        if let ImageStep::Gradient { step } = self.refine.image_step {
            e.push(("gradient_step", step.to_string()));
        }
        e.extend([
            ("fbp_corrections", self.refine.fbp_corrections.to_string()),
            ("nonneg_clamp", self.refine.nonneg_clamp.to_string()),
            ("filter", filter_name(self.refine.filter.kind).to_string()),
            ("cutoff", self.refine.filter.cutoff.to_string()),
            ("refine_tolerance", self.refine.tolerance.to_string()),
        ]);
        e
    }

    fn sparse_entries(&self) -> Vec<(&'static str, String)> {
        vec![
            ("sparse", self.sparse_enabled.to_string()),
            ("lambda1", self.sparse.lambda1.to_string()),
            ("sparse_inner_iters", self.sparse.inner_iters.to_string()),
            ("sparse_outer_iters", self.sparse.outer_iters.to_string()),
        ]
    }

    /// Every setting except the output directory, as key=value pairs that
    /// [`PipelineConfig::set`] accepts.
    pub fn to_pairs(&self) -> Vec<(&'static str, String)> {
        let mut all = self.synth_entries();
        all.extend(self.cluster_entries());
        all.extend(self.denoise_entries());
        all.extend(self.hlcc_entries());
        all.extend(self.grid_entries());
        all.extend(self.refine_entries());
        all.extend(self.sparse_entries());
        all.push(("seed", self.seed.to_string()));
        all
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        io::write_key_values(path, self.to_pairs())
    }
}

/// Persisted output of the generator.
#[derive(Clone, Debug)]
pub struct SynthOutput {
    /// Disk-masked object that the projections were taken of.
    pub object: Image,
    pub dataset: ProjectionSet,
}

#[derive(Clone, Debug)]
pub struct InitOutput {
    pub poses: Vec<Pose>,
    pub energy: f64,
    pub restart_energies: Vec<f64>,
}

#[derive(Clone, Debug)]
pub struct ReconOutput {
    pub image: Image,
    pub poses: Vec<Pose>,
    pub objective_trace: Vec<f64>,
}

/// Results of the stages that ran, in stage order.
#[derive(Clone, Debug, Default)]
pub struct StageOutputs {
    pub synth: Option<SynthOutput>,
    pub clustering: Option<Clustering>,
    pub averages: Option<ClusterAverages>,
    pub denoised: Option<Vec<Projection>>,
    pub init: Option<InitOutput>,
    pub refined: Option<ReconOutput>,
    pub sparse: Option<ReconOutput>,
    pub report: Option<PipelineReport>,
    pub timings: Vec<StageTiming>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct StageTiming {
    pub stage: Stage,
    pub seconds: f64,
    pub cached: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PipelineReport {
    pub seed: u64,
    pub rmse: f64,
    pub registration: RegistrationResult,
    pub sparse_rmse: Option<f64>,
    /// Median aligned angle error in radians.
    pub init_angle_error: f64,
    pub refined_angle_error: f64,
    pub sparse_angle_error: Option<f64>,
    /// Mean absolute shift error in bins, after removing the translation gauge.
    pub init_shift_error: f64,
    pub refined_shift_error: f64,
    /// Fraction of class-1 projections that were discarded.
    pub class1_recall: Option<f64>,
    pub discarded: usize,
    pub clusters: usize,
    pub hlcc_energy: f64,
    pub refine_objective: f64,
    pub config: Vec<(&'static str, String)>,
}

impl PipelineReport {
    /// Deterministic key=value lines; wall times are kept out.
    pub fn to_pairs(&self) -> Vec<(&'static str, String)> {
        let r = &self.registration;
        let mut out = vec![
            ("seed", self.seed.to_string()),
            ("rmse", self.rmse.to_string()),
            ("registration_rotation_deg", r.rotation.to_degrees().to_string()),
            ("registration_reflected", r.reflected.to_string()),
            ("registration_dx", r.translation.0.to_string()),
            ("registration_dy", r.translation.1.to_string()),
            ("init_median_angle_error_deg", self.init_angle_error.to_degrees().to_string()),
            ("refined_median_angle_error_deg", self.refined_angle_error.to_degrees().to_string()),
            ("init_mean_shift_error", self.init_shift_error.to_string()),
            ("refined_mean_shift_error", self.refined_shift_error.to_string()),
        ];
        if let Some(v) = self.sparse_rmse {
            out.push(("sparse_rmse", v.to_string()));
        }
        if let Some(v) = self.sparse_angle_error {
            out.push(("sparse_median_angle_error_deg", v.to_degrees().to_string()));
        }
        if let Some(v) = self.class1_recall {
            out.push(("class1_recall", v.to_string()));
        }
        out.extend([
            ("discarded", self.discarded.to_string()),
            ("clusters", self.clusters.to_string()),
            ("hlcc_energy", self.hlcc_energy.to_string()),
            ("refine_objective", self.refine_objective.to_string()),
        ]);
        out.extend(self.config.iter().map(|(k, v)| (*k, v.clone())));
        out
    }
}

fn stage_err(stage: Stage) -> impl FnOnce(Error) -> Error {
    move |e| match e {
        Error::Stage { .. } => e,
        e => Error::Stage { stage: stage.name(), source: Box::new(e) },
    }
}

fn digest(upstream: &str, stage: Stage, entries: &[(&'static str, String)]) -> String {
    let mut h = Sha256::new();
    h.update(upstream.as_bytes());
    h.update(b"\n");
    h.update(stage.name().as_bytes());
    for (k, v) in entries {
        h.update(b"\n");
        h.update(k.as_bytes());
        h.update(b"=");
        h.update(v.as_bytes());
    }
    hex::encode(h.finalize())
}

/// Runs a stage or reloads it from disk when its key matches.
struct Runner<'a> {
    out: &'a Path,
    timings: Vec<StageTiming>,
}

impl Runner<'_> {
    fn run<T>(
        &mut self,
        stage: Stage,
        key: &str,
        load: impl FnOnce(&Path) -> Result<T>,
        compute: impl FnOnce(&Path) -> Result<T>,
    ) -> Result<T> {
        let dir = self.out.join(stage.dir_name());
        let start = Instant::now();
        let key_path = dir.join(KEY_FILE);
        if fs::read_to_string(&key_path).ok().as_deref() == Some(key) {
            if let Ok(v) = load(&dir) {
                self.timings.push(StageTiming { stage, seconds: start.elapsed().as_secs_f64(), cached: true });
                return Ok(v);
            }
        }
        let wrap = stage_err(stage);
        let result = (|| {
            if dir.exists() {
                fs::remove_dir_all(&dir)?;
            }
            fs::create_dir_all(&dir)?;
            let v = compute(&dir)?;
            fs::write(&key_path, key)?;
            Ok(v)
        })();
        let v = result.map_err(wrap)?;
        self.timings.push(StageTiming { stage, seconds: start.elapsed().as_secs_f64(), cached: false });
        Ok(v)
    }
}

fn load_object(cfg: &PipelineConfig) -> Result<Image> {
    Ok(match &cfg.image {
        ImageSource::File(p) => io::read_image(p)?,
        ImageSource::SheppLogan => phantom::shepp_logan(cfg.side),
        ImageSource::Random(s) => phantom::random_phantom(cfg.side, RngSeed(*s)),
    })
}

fn synth_stage(cfg: &PipelineConfig, dir: &Path) -> Result<SynthOutput> {
    let img = load_object(cfg)?;
    cfg.validate_for_len(img.side())?;
    let side = img.side();
    let alien_images = if cfg.f1_pct > 0.0 {
        let base = RngSeed(cfg.seed).derive(STREAM_ALIENS);
        (0..cfg.aliens).map(|i| phantom::random_phantom(side, base.derive(i as u64))).collect()
    } else {
        Vec::new()
    };
    let corrupt = CorruptionConfig {
        noise_pct: cfg.noise_pct,
        f1_pct: cfg.f1_pct,
        f2_pct: cfg.f2_pct,
        f3_pct: cfg.f3_pct,
        max_shift: cfg.max_shift,
        alien_images,
    };
    let dataset =
        synth::generate_dataset(&img, cfg.count, &cfg.dist, &corrupt, RngSeed(cfg.seed).derive(STREAM_SYNTH))?;
    let object = disk_mask(&img);
    io::save_dataset(&dir.join("dataset"), &dataset)?;
    io::write_raw_image(&dir.join("object.utimg"), &object)?;
    io::write_pgm(&dir.join("object.pgm"), &object)?;
    Ok(SynthOutput { object, dataset })
}

fn load_synth(dir: &Path) -> Result<SynthOutput> {
    Ok(SynthOutput {
        object: io::read_raw_image(&dir.join("object.utimg"))?,
        dataset: io::load_dataset(&dir.join("dataset"))?,
    })
}

fn cluster_stage(cfg: &PipelineConfig, ps: &ProjectionSet, dir: &Path) -> Result<Clustering> {
    let seed = RngSeed(cfg.seed).derive(STREAM_CLUSTER);
    let c = cluster::robust_kmeans_with(ps, cfg.effective_k(), 1.0, cfg.kmeans_iters, cfg.seeding, seed)?;
    let c = cluster::remove_class1(ps, &c, cfg.discard_pct)?;
    save_clustering(dir, &c)?;
    Ok(c)
}

fn save_clustering(dir: &Path, c: &Clustering) -> Result<()> {
    io::write_projections(&dir.join("centroids.utsin"), &c.centroids)?;
    let rows: Vec<Vec<f64>> = c
        .assignments
        .iter()
        .enumerate()
        .map(|(i, a)| vec![i as f64, a.cluster() as f64, a.is_discarded() as u8 as f64])
        .collect();
    io::write_columns_csv(&dir.join("assignments.csv"), &["index", "cluster", "discarded"], &rows)?;
    let trace: Vec<Vec<f64>> = c.objective_trace.iter().map(|v| vec![*v]).collect();
    io::write_columns_csv(&dir.join("objective.csv"), &["objective"], &trace)
}

fn load_clustering(dir: &Path) -> Result<Clustering> {
    let centroids = io::read_projections(&dir.join("centroids.utsin"))?;
    let (_, rows) = io::read_columns_csv(&dir.join("assignments.csv"))?;
    let mut assignments = Vec::with_capacity(rows.len());
    for r in &rows {
        if r.len() != 3 || r[1] < 0.0 || r[1] as usize >= centroids.len() {
            return Err(Error::format("bad assignment row"));
        }
        let j = r[1] as usize;
        assignments.push(if r[2] != 0.0 { Assignment::Discarded(j) } else { Assignment::Member(j) });
    }
    let (_, trace) = io::read_columns_csv(&dir.join("objective.csv"))?;
    Ok(Clustering {
        k: centroids.len(),
        discarded_count: assignments.iter().filter(|a| a.is_discarded()).count(),
        assignments,
        centroids,
        objective_trace: trace.into_iter().map(|r| r[0]).collect(),
    })
}

fn average_stage(ps: &ProjectionSet, c: &Clustering, dir: &Path) -> Result<ClusterAverages> {
    let a = cluster::average_clusters(ps, c)?;
    io::write_projections(&dir.join("averages.utsin"), &a.projections)?;
    let rows: Vec<Vec<f64>> =
        a.cluster_ids.iter().zip(&a.member_counts).map(|(&j, &n)| vec![j as f64, n as f64]).collect();
    io::write_columns_csv(&dir.join("clusters.csv"), &["cluster", "members"], &rows)?;
    let dropped: Vec<Vec<f64>> = a.dropped.iter().map(|&j| vec![j as f64]).collect();
    io::write_columns_csv(&dir.join("dropped.csv"), &["cluster"], &dropped)?;
    Ok(a)
}

fn load_averages(dir: &Path) -> Result<ClusterAverages> {
    let projections = io::read_projections(&dir.join("averages.utsin"))?;
    let (_, rows) = io::read_columns_csv(&dir.join("clusters.csv"))?;
    let (_, dropped) = io::read_columns_csv(&dir.join("dropped.csv"))?;
    if rows.len() != projections.len() {
        return Err(Error::format("cluster table does not match the averages"));
    }
    Ok(ClusterAverages {
        projections,
        cluster_ids: rows.iter().map(|r| r[0] as usize).collect(),
        member_counts: rows.iter().map(|r| r[1] as usize).collect(),
        dropped: dropped.iter().map(|r| r[0] as usize).collect(),
    })
}

fn denoise_stage(cfg: &PipelineConfig, sigma: f64, avg: &ClusterAverages, dir: &Path) -> Result<Vec<Projection>> {
    let out = if cfg.denoise_enabled {
        avg.projections
            .par_iter()
            .zip(&avg.member_counts)
            .map(|(p, &n)| {
                let noise_sd = denoise::effective_sigma(sigma, n)?;
                denoise::denoise_projection(p, &DenoiseConfig { noise_sd, ..cfg.denoise })
            })
            .collect::<Result<Vec<_>>>()?
    } else {
        avg.projections.clone()
    };
    io::write_projections(&dir.join("denoised.utsin"), &out)?;
    Ok(out)
}

fn init_stage(cfg: &PipelineConfig, projections: &[Projection], dir: &Path) -> Result<InitOutput> {
    let sol = hlcc::solve(projections, &cfg.hlcc, RngSeed(cfg.seed).derive(STREAM_HLCC))?;
    io::write_poses_csv(&dir.join("poses.csv"), &sol.poses)?;
    let rows: Vec<Vec<f64>> = sol.restart_energies.iter().map(|e| vec![*e]).collect();
    io::write_columns_csv(&dir.join("restarts.csv"), &["energy"], &rows)?;
    io::write_key_values(&dir.join("energy.txt"), [("energy", sol.energy.to_string())])?;
    Ok(InitOutput { poses: sol.poses, energy: sol.energy, restart_energies: sol.restart_energies })
}

fn load_init(dir: &Path) -> Result<InitOutput> {
    let poses = io::read_poses_csv(&dir.join("poses.csv"))?;
    let (_, rows) = io::read_columns_csv(&dir.join("restarts.csv"))?;
    let kv = io::read_key_values(&dir.join("energy.txt"))?;
    let energy = kv.get("energy").ok_or_else(|| Error::format("energy missing"))?;
    Ok(InitOutput {
        poses,
        energy: parse("energy", energy)?,
        restart_energies: rows.into_iter().map(|r| r[0]).collect(),
    })
}

fn save_recon(dir: &Path, r: &ReconOutput) -> Result<()> {
    io::write_raw_image(&dir.join("image.utimg"), &r.image)?;
    io::write_pgm(&dir.join("image.pgm"), &r.image)?;
    io::write_poses_csv(&dir.join("poses.csv"), &r.poses)?;
    let rows: Vec<Vec<f64>> = r.objective_trace.iter().map(|v| vec![*v]).collect();
    io::write_columns_csv(&dir.join("objective.csv"), &["objective"], &rows)
}

fn load_recon(dir: &Path) -> Result<ReconOutput> {
    let (_, rows) = io::read_columns_csv(&dir.join("objective.csv"))?;
    Ok(ReconOutput {
        image: io::read_raw_image(&dir.join("image.utimg"))?,
        poses: io::read_poses_csv(&dir.join("poses.csv"))?,
        objective_trace: rows.into_iter().map(|r| r[0]).collect(),
    })
}

fn refine_stage(cfg: &PipelineConfig, q: &[Projection], init: &[Pose], dir: &Path) -> Result<ReconOutput> {
    let r = refine::refine(q, init, &cfg.refine)?;
    let mut trace = r.objective_trace;
    trace.push(r.final_objective);
    let out = ReconOutput { image: r.image, poses: r.poses, objective_trace: trace };
    save_recon(dir, &out)?;
    Ok(out)
}

fn sparse_stage(cfg: &PipelineConfig, q: &[Projection], init: &[Pose], dir: &Path) -> Result<ReconOutput> {
    let r = sparse::sparse_reconstruct(q, init, &cfg.sparse)?;
    let out = ReconOutput { image: r.image, poses: r.poses, objective_trace: r.objective_trace };
    save_recon(dir, &out)?;
    io::write_key_values(&dir.join("lambda.txt"), [("lambda1", r.lambda1.to_string())])?;
    Ok(out)
}

/// Per-average ground truth: circular mean angle and mean shift of the
/// surviving cluster members.
fn average_truth(ps: &ProjectionSet, c: &Clustering, avg: &ClusterAverages) -> Result<(Vec<f64>, Vec<f64>)> {
    let mut angles = Vec::with_capacity(avg.cluster_ids.len());
    let mut shifts = Vec::with_capacity(avg.cluster_ids.len());
    for &j in &avg.cluster_ids {
        angles.push(cluster::cluster_truth_angle(ps, c, j)?);
        shifts.push(cluster::cluster_truth_shift(ps, c, j)?);
    }
    Ok((angles, shifts))
}

fn class1_recall(ps: &ProjectionSet, c: &Clustering) -> Option<f64> {
    let truth = ps.truth()?;
    let total = truth.iter().filter(|t| t.outlier_class == OutlierClass::Class1).count();
    if total == 0 {
        return None;
    }
    let hit = truth
        .iter()
        .zip(&c.assignments)
        .filter(|(t, a)| t.outlier_class == OutlierClass::Class1 && a.is_discarded())
        .count();
    Some(hit as f64 / total as f64)
}

fn aligned(est: &[Pose], al: &metrics::AngleAlignment) -> Vec<f64> {
    est.iter()
        .map(|p| {
            let a = if al.reflected { -p.angle } else { p.angle };
            canonicalize_angle(a + al.rotation).expect("finite")
        })
        .collect()
}

struct EvalInputs<'a> {
    synth: &'a SynthOutput,
    clustering: &'a Clustering,
    averages: &'a ClusterAverages,
    init: &'a InitOutput,
    refined: &'a ReconOutput,
    sparse: Option<&'a ReconOutput>,
}

fn evaluate_stage(cfg: &PipelineConfig, inp: &EvalInputs<'_>, dir: &Path) -> Result<PipelineReport> {
    let ps = &inp.synth.dataset;
    let (truth_angles, truth_shifts) = average_truth(ps, inp.clustering, inp.averages)?;
    let angles = |poses: &[Pose]| poses.iter().map(|p| p.angle).collect::<Vec<_>>();

    let init_al = metrics::angle_errors(&angles(&inp.init.poses), &truth_angles)?;
    let ref_al = metrics::angle_errors(&angles(&inp.refined.poses), &truth_angles)?;
    let init_sh = metrics::shift_errors(&inp.init.poses, &truth_shifts)?;
    let ref_sh = metrics::shift_errors(&inp.refined.poses, &truth_shifts)?;

    let reg = metrics::register_and_rmse(&inp.synth.object, &inp.refined.image)?;
    let registered = metrics::apply_registration(&inp.refined.image, &reg);
    io::write_raw_image(&dir.join("registered.utimg"), &registered)?;
    io::write_pgm(&dir.join("registered.pgm"), &registered)?;

    let (sparse_rmse, sparse_angle_error) = match inp.sparse {
        Some(s) => {
            let reg = metrics::register_and_rmse(&inp.synth.object, &s.image)?;
            let registered = metrics::apply_registration(&s.image, &reg);
            io::write_raw_image(&dir.join("sparse_registered.utimg"), &registered)?;
            io::write_pgm(&dir.join("sparse_registered.pgm"), &registered)?;
            let al = metrics::angle_errors(&angles(&s.poses), &truth_angles)?;
            (Some(reg.rmse), Some(al.median()))
        }
        None => (None, None),
    };

    let init_aligned = aligned(&inp.init.poses, &init_al);
    let ref_aligned = aligned(&inp.refined.poses, &ref_al);
    let rows: Vec<Vec<f64>> = (0..truth_angles.len())
        .map(|i| {
            vec![
                inp.averages.cluster_ids[i] as f64,
                truth_angles[i],
                init_aligned[i],
                ref_aligned[i],
                truth_shifts[i],
                inp.refined.poses[i].shift,
            ]
        })
        .collect();
    io::write_columns_csv(
        &dir.join("scatter.csv"),
        &["cluster", "truth_angle", "init_angle", "refined_angle", "truth_shift", "refined_shift"],
        &rows,
    )?;

    let report = PipelineReport {
        seed: cfg.seed,
        rmse: reg.rmse,
        registration: reg,
        sparse_rmse,
        init_angle_error: init_al.median(),
        refined_angle_error: ref_al.median(),
        sparse_angle_error,
        init_shift_error: init_sh.mean(),
        refined_shift_error: ref_sh.mean(),
        class1_recall: class1_recall(ps, inp.clustering),
        discarded: inp.clustering.discarded_count,
        clusters: inp.averages.projections.len(),
        hlcc_energy: inp.init.energy,
        refine_objective: inp.refined.objective_trace.last().copied().unwrap_or(f64::NAN),
        config: cfg.to_pairs(),
    };
    io::write_key_values(&dir.join("report.txt"), report.to_pairs())?;
    Ok(report)
}

fn load_report(cfg: &PipelineConfig, dir: &Path) -> Result<PipelineReport> {
    let kv: BTreeMap<String, String> = io::read_key_values(&dir.join("report.txt"))?;
    let num = |k: &str| -> Result<f64> {
        kv.get(k).ok_or_else(|| Error::format(format!("report lacks `{k}`"))).and_then(|v| parse(k, v))
    };
    let opt = |k: &str| -> Result<Option<f64>> { kv.get(k).map(|v| parse(k, v)).transpose() };
    Ok(PipelineReport {
        seed: num("seed")? as u64,
        rmse: num("rmse")?,
        registration: RegistrationResult {
            rotation: num("registration_rotation_deg")?.to_radians(),
            reflected: kv.get("registration_reflected").map(String::as_str) == Some("true"),
            translation: (num("registration_dx")?, num("registration_dy")?),
            rmse: num("rmse")?,
        },
        sparse_rmse: opt("sparse_rmse")?,
        init_angle_error: num("init_median_angle_error_deg")?.to_radians(),
        refined_angle_error: num("refined_median_angle_error_deg")?.to_radians(),
        sparse_angle_error: opt("sparse_median_angle_error_deg")?.map(f64::to_radians),
        init_shift_error: num("init_mean_shift_error")?,
        refined_shift_error: num("refined_mean_shift_error")?,
        class1_recall: opt("class1_recall")?,
        discarded: num("discarded")? as usize,
        clusters: num("clusters")? as usize,
        hlcc_energy: num("hlcc_energy")?,
        refine_objective: num("refine_objective")?,
        config: cfg.to_pairs(),
    })
}

/// Runs every stage up to and including `last`, reusing persisted stages
/// whose keys match. `Sparse` is skipped unless enabled or requested.
pub fn run_stages(cfg: &PipelineConfig, last: Stage) -> Result<StageOutputs> {
    cfg.validate()?;
    fs::create_dir_all(&cfg.out)?;
    cfg.write(&cfg.out.join("config.txt"))?;
    let mut run = Runner { out: &cfg.out, timings: Vec::new() };
    let mut outs = StageOutputs::default();

    let mut key = digest("", Stage::Synth, &[("seed", cfg.seed.to_string())]);
    key = digest(&key, Stage::Synth, &cfg.synth_entries());
    let synth = run.run(Stage::Synth, &key, load_synth, |d| synth_stage(cfg, d))?;
    cfg.validate_for_len(synth.dataset.bins()).map_err(stage_err(Stage::Synth))?;
    let sigma = cfg.sigma.or(synth.dataset.noise_sigma()).unwrap_or(0.0);

    let result = (|| {
        if last == Stage::Synth {
            return Ok(());
        }
        let ps = &synth.dataset;
        key = digest(&key, Stage::Cluster, &cfg.cluster_entries());
        let clustering = run.run(Stage::Cluster, &key, load_clustering, |d| cluster_stage(cfg, ps, d))?;
        outs.clustering = Some(clustering.clone());
        if last == Stage::Cluster {
            return Ok(());
        }

        key = digest(&key, Stage::Average, &[]);
        let averages = run.run(Stage::Average, &key, load_averages, |d| average_stage(ps, &clustering, d))?;
        outs.averages = Some(averages.clone());
        if last == Stage::Average {
            return Ok(());
        }

        key = digest(&key, Stage::Denoise, &cfg.denoise_entries());
        let denoised = run.run(
            Stage::Denoise,
            &key,
            |d| io::read_projections(&d.join("denoised.utsin")),
            |d| denoise_stage(cfg, sigma, &averages, d),
        )?;
        outs.denoised = Some(denoised.clone());
        if last == Stage::Denoise {
            return Ok(());
        }

        key = digest(&key, Stage::InitPoses, &cfg.hlcc_entries());
        let init = run.run(Stage::InitPoses, &key, load_init, |d| init_stage(cfg, &denoised, d))?;
        outs.init = Some(init.clone());
        if last == Stage::InitPoses {
            return Ok(());
        }

        let mut grid = cfg.grid_entries();
        grid.push(("max_shift", cfg.max_shift.to_string()));
        let recon_key = key.clone();
        let mut refine_entries = grid.clone();
        refine_entries.extend(cfg.refine_entries());
        let refine_key = digest(&recon_key, Stage::Refine, &refine_entries);
        let refined =
            run.run(Stage::Refine, &refine_key, load_recon, |d| refine_stage(cfg, &denoised, &init.poses, d))?;
        outs.refined = Some(refined.clone());
        if last == Stage::Refine {
            return Ok(());
        }

        let mut eval_key = refine_key.clone();
        if cfg.sparse_enabled || last == Stage::Sparse {
            let mut sparse_entries = grid.clone();
            sparse_entries.extend(cfg.sparse_entries());
            let sparse_key = digest(&recon_key, Stage::Sparse, &sparse_entries);
            let s =
                run.run(Stage::Sparse, &sparse_key, load_recon, |d| sparse_stage(cfg, &denoised, &init.poses, d))?;
            outs.sparse = Some(s);
            eval_key = digest(&eval_key, Stage::Sparse, &[("sparse_key", sparse_key)]);
        }
        if last == Stage::Sparse {
            return Ok(());
        }

        eval_key = digest(&eval_key, Stage::Evaluate, &cfg.to_pairs());
        let inputs = EvalInputs {
            synth: &synth,
            clustering: &clustering,
            averages: &averages,
            init: &init,
            refined: &refined,
            sparse: outs.sparse.as_ref(),
        };
        let report =
            run.run(Stage::Evaluate, &eval_key, |d| load_report(cfg, d), |d| evaluate_stage(cfg, &inputs, d))?;
        outs.report = Some(report);
        Ok(())
    })();

    outs.synth = Some(synth);
    outs.timings = run.timings;
    write_timings(&cfg.out, &outs.timings)?;
    result.map(|()| outs)
}

fn write_timings(out: &Path, timings: &[StageTiming]) -> Result<()> {
    let lines: Vec<(&str, String)> = timings
        .iter()
        .map(|t| (t.stage.name(), format!("{:.3}{}", t.seconds, if t.cached { " cached" } else { "" })))
        .collect();
    io::write_key_values(&out.join("timings.txt"), lines)
}

/// Runs the full pipeline and returns its report.
pub fn run_pipeline(cfg: &PipelineConfig) -> Result<PipelineReport> {
    let outs = run_stages(cfg, Stage::Evaluate)?;
    Ok(outs.report.expect("evaluate ran"))
}
