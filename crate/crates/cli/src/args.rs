use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

#[derive(Debug, Parser)]
#[command(name = "pmk", version, about = "Pose-motion toolkit: encode, augment, train, select clips")]
pub struct Cli {
    #[command(flatten)]
    pub global: Global,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct Global {
    /// Base run configuration (JSON); flags override its keys.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Seed for every random stream.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Single-threaded execution everywhere.
    #[arg(long, global = true)]
    pub deterministic: bool,
    /// Worker threads (falls back to PMK_THREADS, then all cores).
    #[arg(long, global = true)]
    pub workers: Option<usize>,
    /// Log at info level (twice for debug).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    pub verbose: u8,
    #[command(flatten)]
    pub overrides: Overrides,
}

/// One flag per `RunConfig` key. Set flags replace the config file value.
#[derive(Debug, Default, Clone, Args, Serialize)]
pub struct Overrides {
    #[arg(long, global = true)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub channels: Option<usize>,
    /// raw | tan | max
    #[arg(long, global = true)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub norm: Option<String>,
    /// jmrn | baseline
    #[arg(long, global = true)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub model: Option<String>,
    #[arg(long, global = true)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub flip_prob: Option<f64>,
    #[arg(long, global = true)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub c_dim: Option<usize>,
    #[arg(long, global = true)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub tau: Option<f64>,
    #[arg(long, global = true)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub prior_a: Option<f64>,
    #[arg(long, global = true)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub prior_b: Option<f64>,
    #[arg(long, global = true)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub lambda_reg: Option<f64>,
    /// sampled | deterministic
    #[arg(long, global = true)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub reg_target: Option<String>,
    #[arg(long, global = true)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub lr: Option<f64>,
    #[arg(long, global = true)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub patience: Option<usize>,
    #[arg(long, global = true)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub decay: Option<f64>,
    #[arg(long, global = true)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub epochs: Option<usize>,
    #[arg(long, global = true)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub batch_size: Option<usize>,
    #[arg(long, global = true)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub multi_label: Option<bool>,
    #[arg(long, global = true)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub oracle_k: Option<usize>,
    #[arg(long, global = true)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub k_select: Option<usize>,
    /// max | avg
    #[arg(long, global = true)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub consensus: Option<String>,
    /// logistic | margin
    #[arg(long, global = true)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub ranker_loss: Option<String>,
    #[arg(long, global = true)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub ranker_margin: Option<f64>,
    #[arg(long, global = true)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub ranker_epochs: Option<usize>,
    #[arg(long, global = true)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub ranker_pairs: Option<usize>,
}

/// Augmentation jitter; separate because `sweep` takes lists instead.
#[derive(Debug, Default, Clone, Args, Serialize)]
pub struct Jitter {
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub beta: Option<usize>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub gamma: Option<usize>,
}

/// Synthetic corpus shape. Unset flags keep the spec file or default value.
#[derive(Debug, Default, Clone, Args, Serialize)]
pub struct SynthArgs {
    /// SynthSpec JSON to start from.
    #[arg(long)]
    #[serde(skip)]
    pub spec: Option<PathBuf>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub num_classes: Option<usize>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub samples_per_class: Option<usize>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub min_frames: Option<usize>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub max_frames: Option<usize>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub height: Option<usize>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub width: Option<usize>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub sigma: Option<f64>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub dropout: Option<f64>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub noise_std: Option<f64>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub occlusion_prob: Option<f64>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub val_fraction: Option<f64>,
    /// Comma-separated joint names that wander independently of the class.
    #[arg(long, value_delimiter = ',')]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub distractors: Option<Vec<String>>,
}

#[derive(Debug, Args)]
pub struct DataArg {
    /// A manifest (JSON list of records) or a SynthSpec JSON object, which is
    /// generated in memory.
    #[arg(long)]
    pub data: PathBuf,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate the trimmed synthetic corpus.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        synth: SynthArgs,
    },
    /// Generate untrimmed videos with annotated action windows.
    SynthUntrimmed {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0.5)]
        window_fraction: f64,
        #[arg(long, default_value_t = 10)]
        videos_per_class: usize,
        #[command(flatten)]
        synth: SynthArgs,
    },
    /// Encode every sequence of a manifest into a representation.
    Encode {
        #[command(flatten)]
        data: DataArg,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write augmented copies of one sequence or representation.
    Augment {
        #[command(flatten)]
        jitter: Jitter,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 1)]
        count: usize,
    },
    /// Train a classifier and write a run directory.
    Train {
        #[command(flatten)]
        jitter: Jitter,
        #[command(flatten)]
        data: DataArg,
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate a checkpoint on one split.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[command(flatten)]
        data: DataArg,
        #[arg(long, default_value = "val")]
        split: String,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Per-joint eval-time gate weights as CSV.
    GateReport {
        #[arg(long)]
        checkpoint: PathBuf,
        #[command(flatten)]
        data: DataArg,
        #[arg(long, default_value = "val")]
        split: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the clip classifier and build oracle clip sets.
    ClipsOracle {
        #[command(flatten)]
        jitter: Jitter,
        #[command(flatten)]
        data: DataArg,
        #[arg(long)]
        out: PathBuf,
        /// Window fraction when `--data` is a SynthSpec.
        #[arg(long, default_value_t = 0.5)]
        window_fraction: f64,
    },
    /// Train the saliency ranker against the oracle.
    ClipsTrain {
        #[command(flatten)]
        jitter: Jitter,
        #[command(flatten)]
        data: DataArg,
        #[arg(long)]
        run: PathBuf,
        #[arg(long, default_value_t = 0.5)]
        window_fraction: f64,
    },
    /// Select clips on held-out videos and classify them.
    ClipsSelect {
        #[command(flatten)]
        jitter: Jitter,
        #[command(flatten)]
        data: DataArg,
        #[arg(long)]
        run: PathBuf,
        #[arg(long)]
        k: Option<usize>,
        #[arg(long, default_value_t = 0.5)]
        window_fraction: f64,
    },
    /// Time a kernel.
    Bench {
        /// aggregate | gemm | train-step
        #[arg(long, default_value = "aggregate")]
        op: String,
        /// NxJxHxW for aggregate, MxKxN for gemm.
        #[arg(long, default_value = "64x19x64x64")]
        shape: String,
        #[arg(long, default_value_t = 64)]
        frames: usize,
        #[arg(long, default_value_t = 3)]
        reps: usize,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train one model per (beta, gamma) cell.
    Sweep {
        #[command(flatten)]
        data: DataArg,
        #[arg(long, value_delimiter = ',', default_value = "0,2,4")]
        beta: Vec<usize>,
        #[arg(long, value_delimiter = ',', default_value = "0,2,4")]
        gamma: Vec<usize>,
        #[arg(long)]
        out: PathBuf,
    },
}
