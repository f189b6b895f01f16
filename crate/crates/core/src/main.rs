use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use untomo::pipeline::{run_stages, PipelineConfig, Stage, StageOutputs};
use untomo::Error;

/// Reconstruct a 2D object from projections at unknown angles and shifts.
#[derive(Parser)]
#[command(name = "untomo", version)]
struct Cli {
    /// Flat key=value configuration file; flags override it.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads (default: all cores). Results do not depend on it.
    #[arg(long, global = true)]
    workers: Option<usize>,
    /// Output directory holding one subdirectory per stage.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Extra configuration override, repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    set: Vec<String>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic projection dataset.
    Synth(SynthArgs),
    /// Cluster projections and discard the farthest ones.
    Cluster(ClusterArgs),
    /// Average clusters and denoise the averages.
    Denoise(DenoiseArgs),
    /// Estimate initial poses from moment consistency.
    InitPoses(InitArgs),
    /// Alternate image and pose updates.
    Refine(RefineArgs),
    /// Sparsity-regularized reconstruction for comparison.
    Sparse(SparseArgs),
    /// Register against the truth and write the report.
    Evaluate,
    /// Run every stage.
    Run(RunArgs),
}

#[derive(Args, Default)]
struct SynthArgs {
    /// `phantom:shepp-logan`, `phantom:random:<seed>` or an image file.
    #[arg(long)]
    image: Option<String>,
    #[arg(long)]
    side: Option<usize>,
    #[arg(long)]
    count: Option<usize>,
    /// `uniform`, `four-segment` or `lo:hi:w,...` in radians.
    #[arg(long)]
    dist: Option<String>,
    #[arg(long)]
    noise_pct: Option<f64>,
    #[arg(long)]
    f1: Option<f64>,
    #[arg(long)]
    f2: Option<f64>,
    #[arg(long)]
    f3: Option<f64>,
    #[arg(long)]
    max_shift: Option<f64>,
}

#[derive(Args, Default)]
struct ClusterArgs {
    /// Cluster count, or `auto` for count/100.
    #[arg(long)]
    k: Option<String>,
    /// Percentage of projections discarded.
    #[arg(long)]
    f: Option<f64>,
    #[arg(long)]
    iters: Option<usize>,
}

#[derive(Args, Default)]
struct DenoiseArgs {
    #[arg(long)]
    patch_len: Option<usize>,
    /// `wiener` or `hard`.
    #[arg(long)]
    shrink: Option<String>,
    /// Per-bin noise σ of the raw projections.
    #[arg(long)]
    sigma: Option<f64>,
}

#[derive(Args, Default)]
struct InitArgs {
    /// Highest moment order.
    #[arg(long)]
    k: Option<usize>,
    #[arg(long)]
    restarts: Option<usize>,
    #[arg(long)]
    max_shift: Option<f64>,
}

#[derive(Args, Default)]
struct RefineArgs {
    #[arg(long)]
    outer_iters: Option<usize>,
    /// Pose grid angle step in degrees.
    #[arg(long)]
    angle_step: Option<f64>,
    #[arg(long)]
    shift_step: Option<f64>,
    /// `fbp` or `gradient`.
    #[arg(long)]
    image_step: Option<String>,
}

#[derive(Args, Default)]
struct SparseArgs {
    /// L1 penalty on DCT coefficients; a trailing `x` makes it relative to the data scale.
    #[arg(long)]
    lambda1: Option<String>,
}

#[derive(Args, Default)]
struct RunArgs {
    #[command(flatten)]
    synth: SynthArgs,
    #[arg(long)]
    k_c: Option<String>,
    #[arg(long)]
    f: Option<f64>,
    /// Also run the sparsity-regularized reconstruction.
    #[arg(long)]
    sparse: bool,
}

type Pairs = Vec<(&'static str, String)>;

fn push<T: ToString>(pairs: &mut Pairs, key: &'static str, v: &Option<T>) {
    if let Some(v) = v {
        pairs.push((key, v.to_string()));
    }
}

impl SynthArgs {
    fn pairs(&self, p: &mut Pairs) {
        push(p, "image", &self.image);
        push(p, "side", &self.side);
        push(p, "count", &self.count);
        push(p, "dist", &self.dist);
        push(p, "noise_pct", &self.noise_pct);
        push(p, "f1", &self.f1);
        push(p, "f2", &self.f2);
        push(p, "f3", &self.f3);
        push(p, "max_shift", &self.max_shift);
    }
}

impl Command {
    fn stage_and_pairs(&self) -> (Stage, Pairs) {
        let mut p = Pairs::new();
        let stage = match self {
            Command::Synth(a) => {
                a.pairs(&mut p);
                Stage::Synth
            }
            Command::Cluster(a) => {
                push(&mut p, "k_c", &a.k);
                push(&mut p, "f", &a.f);
                push(&mut p, "kmeans_iters", &a.iters);
                Stage::Cluster
            }
            Command::Denoise(a) => {
                push(&mut p, "patch_len", &a.patch_len);
                push(&mut p, "shrink", &a.shrink);
                push(&mut p, "sigma", &a.sigma);
                Stage::Denoise
            }
            Command::InitPoses(a) => {
                push(&mut p, "order", &a.k);
                push(&mut p, "restarts", &a.restarts);
                push(&mut p, "max_shift", &a.max_shift);
                Stage::InitPoses
            }
            Command::Refine(a) => {
                push(&mut p, "outer_iters", &a.outer_iters);
                push(&mut p, "angle_step", &a.angle_step);
                push(&mut p, "shift_step", &a.shift_step);
                push(&mut p, "image_step", &a.image_step);
                Stage::Refine
            }
            Command::Sparse(a) => {
                push(&mut p, "lambda1", &a.lambda1);
                p.push(("sparse", "true".into()));
                Stage::Sparse
            }
            Command::Evaluate => Stage::Evaluate,
            Command::Run(a) => {
                a.synth.pairs(&mut p);
                push(&mut p, "k_c", &a.k_c);
                push(&mut p, "f", &a.f);
                if a.sparse {
                    p.push(("sparse", "true".into()));
                }
                Stage::Evaluate
            }
        };
        (stage, p)
    }
}

fn build_config(cli: &Cli, pairs: &Pairs) -> Result<PipelineConfig, Error> {
    let mut cfg = match &cli.config {
        Some(path) => PipelineConfig::from_file(path)?,
        None => PipelineConfig::default(),
    };
    for (k, v) in pairs {
        cfg.set(k, v)?;
    }
    for kv in &cli.set {
        let (k, v) =
            kv.split_once('=').ok_or_else(|| Error::InvalidArgument(format!("--set `{kv}` is not KEY=VALUE")))?;
        cfg.set(k.trim(), v)?;
    }
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if let Some(out) = &cli.out {
        cfg.out = out.clone();
    }
    cfg.validate()?;
    Ok(cfg)
}

fn summarize(outs: &StageOutputs) {
    for t in &outs.timings {
        let note = if t.cached { " (cached)" } else { "" };
        eprintln!("{:<11} {:>8.2}s{note}", t.stage.name(), t.seconds);
    }
    if let Some(r) = &outs.report {
        println!("rmse {:.4}", r.rmse);
        println!(
            "median angle error: init {:.2} deg, refined {:.2} deg",
            r.init_angle_error.to_degrees(),
            r.refined_angle_error.to_degrees()
        );
        if let Some(s) = r.sparse_rmse {
            println!("sparse rmse {s:.4}");
        }
        if let Some(recall) = r.class1_recall {
            println!("class-1 recall {recall:.4}");
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Some(n) = cli.workers {
        if n == 0 {
            eprintln!("error: --workers must be >= 1");
            return ExitCode::from(2);
        }
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: {e}");
            return ExitCode::from(3);
        }
    }
    let (stage, pairs) = cli.command.stage_and_pairs();
    let result = build_config(&cli, &pairs).and_then(|cfg| {
        let outs = run_stages(&cfg, stage)?;
        eprintln!("outputs in {}", cfg.out.display());
        Ok(outs)
    });
    match result {
        Ok(outs) => {
            summarize(&outs);
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_validation() { 2 } else { 3 })
        }
    }
}
