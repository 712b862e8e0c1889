use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use insmos::config::ModelConfig;
use insmos::dataio::LabelMapping;
use insmos::Result;

/// Instance-aware moving object segmentation for LiDAR sequences.
#[derive(Debug, Parser)]
#[command(name = "insmos", version)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate synthetic sequences on disk.
    Synth(SynthArgs),
    /// Train the toy network on synthetic scenes and write a checkpoint.
    Train(TrainArgs),
    /// Predict per-point labels and instance boxes for a sequence.
    Infer(InferArgs),
    /// Apply instance-based refinement to predicted labels.
    Refine(RefineArgs),
    /// Moving-object IoU of predicted labels against ground truth.
    Eval(EvalArgs),
    /// Per-stage timing of inference and refinement.
    Bench(BenchArgs),
}

#[derive(Debug, Args)]
pub struct RefinementArgs {
    #[arg(long)]
    pub alpha0: Option<f64>,
    #[arg(long)]
    pub alpha1: Option<f64>,
    #[arg(long)]
    pub beta0: Option<f64>,
    #[arg(long)]
    pub beta1: Option<usize>,
    #[arg(long)]
    pub theta0: Option<usize>,
    #[arg(long)]
    pub theta1: Option<usize>,
    /// Largest center distance for cross-frame box matching, meters.
    #[arg(long)]
    pub match_radius: Option<f64>,
    /// Largest per-axis size ratio for cross-frame box matching.
    #[arg(long)]
    pub size_ratio_max: Option<f64>,
}

#[derive(Debug, Args)]
pub struct ConfigArgs {
    /// Model configuration (TOML). Defaults to `<checkpoint>.toml` when
    /// present, otherwise the built-in toy configuration.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Number of input scans N, current one included.
    #[arg(long)]
    pub n_scans: Option<usize>,
    /// Temporal voxel resolution in seconds.
    #[arg(long)]
    pub delta_t: Option<f64>,
    /// Spatial voxel size in meters.
    #[arg(long)]
    pub delta_s: Option<f64>,
    /// Heatmap peak threshold for instance decoding.
    #[arg(long)]
    pub score_threshold: Option<f64>,
    #[arg(long)]
    pub top_k: Option<usize>,
    #[command(flatten)]
    pub refinement: RefinementArgs,
}

impl ConfigArgs {
    pub fn resolve(&self, checkpoint: Option<&Path>) -> Result<ModelConfig> {
        let sibling = checkpoint.map(|c| c.with_extension("toml")).filter(|p| p.is_file());
        let mut cfg = match self.config.as_deref().or(sibling.as_deref()) {
            Some(p) => ModelConfig::load(p)?,
            None => ModelConfig::toy(),
        };
        let q = &mut cfg.quantization;
        set(&mut q.n_scans, self.n_scans);
        set(&mut q.delta_t, self.delta_t);
        set(&mut q.delta_s, self.delta_s);
        set(&mut cfg.decode.score_threshold, self.score_threshold);
        set(&mut cfg.decode.top_k, self.top_k);
        let (r, a) = (&mut cfg.refinement, &self.refinement);
        set(&mut r.alpha0, a.alpha0);
        set(&mut r.alpha1, a.alpha1);
        set(&mut r.beta0, a.beta0);
        set(&mut r.beta1, a.beta1);
        set(&mut r.theta0, a.theta0);
        set(&mut r.theta1, a.theta1);
        set(&mut r.match_radius, a.match_radius);
        set(&mut r.size_ratio_max, a.size_ratio_max);
        cfg.validate()?;
        Ok(cfg)
    }
}

fn set<T>(slot: &mut T, value: Option<T>) {
    if let Some(v) = value {
        *slot = v;
    }
}

#[derive(Debug, Args)]
pub struct MappingArgs {
    /// Label mapping (TOML); defaults to the SemanticKITTI moving/static convention.
    #[arg(long)]
    pub mapping: Option<PathBuf>,
}

impl MappingArgs {
    pub fn load(&self) -> Result<LabelMapping> {
        self.mapping.as_deref().map_or_else(|| Ok(LabelMapping::default()), LabelMapping::load)
    }
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    /// Output directory; sequence `i` goes to `<out>/<i:03>`.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 1)]
    pub scenes: usize,
    #[arg(long, default_value_t = 8)]
    pub frames: usize,
    /// Seed of the first scene; scene `i` uses `seed + i`.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub static_objects: Option<usize>,
    #[arg(long)]
    pub moving_objects: Option<usize>,
    #[command(flatten)]
    pub mapping: MappingArgs,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Checkpoint to write; the configuration goes next to it as `.toml`.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 50)]
    pub scenes: usize,
    #[arg(long, default_value_t = 8)]
    pub frames: usize,
    /// Seed of the first training scene.
    #[arg(long, default_value_t = 0)]
    pub scene_seed: u64,
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub learning_rate: Option<f64>,
    /// Seed of parameter initialization and frame sampling.
    #[arg(long)]
    pub seed: Option<u64>,
    #[command(flatten)]
    pub config: ConfigArgs,
}

#[derive(Debug, Args)]
pub struct InferArgs {
    /// Sequence manifest or its directory.
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Receives `predictions/`, `confidence/` and `boxes.txt`.
    #[arg(long)]
    pub out: PathBuf,
    /// Scans read ahead of the network.
    #[arg(long, default_value_t = 2)]
    pub prefetch: usize,
    #[command(flatten)]
    pub config: ConfigArgs,
    #[command(flatten)]
    pub mapping: MappingArgs,
}

#[derive(Debug, Args)]
pub struct RefineArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    /// Output directory of `infer`.
    #[arg(long)]
    pub predictions: PathBuf,
    /// Box file; defaults to `<predictions>/boxes.txt`.
    #[arg(long)]
    pub boxes: Option<PathBuf>,
    /// Receives `predictions/` with the refined labels.
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub config: ConfigArgs,
    #[command(flatten)]
    pub mapping: MappingArgs,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Directory of `.label` files, or one holding `predictions/`.
    #[arg(long)]
    pub predictions: PathBuf,
    /// Ground truth from a sequence manifest.
    #[arg(long, conflicts_with = "labels", required_unless_present = "labels")]
    pub manifest: Option<PathBuf>,
    /// Ground truth from a directory of `.label` files.
    #[arg(long)]
    pub labels: Option<PathBuf>,
    #[command(flatten)]
    pub mapping: MappingArgs,
}

#[derive(Debug, Args)]
pub struct BenchArgs {
    /// Sequence to time; a synthetic scene is generated when absent.
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    /// Freshly initialized parameters when absent.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long, default_value_t = 1)]
    pub repeat: usize,
    /// Synthetic scene seed.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 8)]
    pub frames: usize,
    #[command(flatten)]
    pub config: ConfigArgs,
}
