//! `tba`: capture block representations, find redundant spans, replace them
//! with fitted maps and measure the effect.

mod commands;
mod record;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use tba_core::Error;

#[derive(Parser, Debug)]
#[command(name = "tba", version, about = "Transformer block approximation pipeline")]
struct Cli {
    /// Directory receiving every output file and run.json.
    #[arg(long, global = true, default_value = "out")]
    out_dir: PathBuf,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug, Serialize)]
#[serde(tag = "command", rename_all = "lowercase")]
enum Command {
    /// Generate a random model with planted spans plus train/test datasets.
    Synth(SynthArgs),
    /// Record per-block outputs over a data subset.
    Capture(CaptureArgs),
    /// Block similarity matrix and ranked candidate spans.
    Identify(IdentifyArgs),
    /// Fit linear maps for spans and write a plan.
    Fit(FitArgs),
    /// Apply a plan and report parameters and last-block drift.
    Patch(PatchArgs),
    /// Linear-probe accuracy of the original and (optionally) patched model.
    Eval(EvalArgs),
    /// Fit on one dataset, probe on another.
    Generalize(GeneralizeArgs),
    /// Drift of the last block when approximating each single block.
    Drift(DriftArgs),
    /// Shared-axis PCA of original and patched final representations.
    Pca(PcaArgs),
    /// Linear map vs identity skip vs trained MLPs on the same spans.
    Compare(CompareArgs),
}

/// Data subset selection.
#[derive(Args, Debug, Clone, Serialize)]
struct SubsetArgs {
    /// Dataset: a container file, or `idx:IMAGES:LABELS` for IDX files.
    #[arg(long)]
    data: String,
    /// Number of samples drawn uniformly without replacement.
    #[arg(long)]
    samples: Option<usize>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args, Debug, Clone, Serialize)]
struct ReduceArgs {
    /// Token reduction: mean, cls or all.
    #[arg(long, default_value = "mean")]
    reduce: String,
    /// Leave the CLS token out of the token mean.
    #[arg(long)]
    exclude_cls: bool,
    /// Samples per capture batch.
    #[arg(long, default_value_t = 64)]
    batch: usize,
}

#[derive(Args, Debug, Clone, Serialize)]
struct FitFlags {
    /// Fit an affine map (adds a bias).
    #[arg(long)]
    bias: bool,
    #[arg(long, default_value_t = 1e-6)]
    rcond: f64,
}

#[derive(Args, Debug, Clone, Serialize)]
struct ProbeFlags {
    /// Comma-separated probe seeds.
    #[arg(long, default_value = "0,1,2")]
    seeds: String,
    #[arg(long, default_value_t = 5)]
    epochs: usize,
    #[arg(long, default_value_t = 0.001)]
    probe_lr: f64,
    #[arg(long, default_value_t = 256)]
    probe_batch: usize,
    /// Probe input: cls or mean of the final tokens.
    #[arg(long, default_value = "cls")]
    probe_feature: String,
}

#[derive(Args, Debug, Serialize)]
struct SynthArgs {
    #[arg(long, default_value_t = 8)]
    blocks: usize,
    #[arg(long, default_value_t = 32)]
    d_model: usize,
    #[arg(long, default_value_t = 4)]
    heads: usize,
    /// Defaults to 4 * d_model.
    #[arg(long)]
    mlp_hidden: Option<usize>,
    #[arg(long, default_value_t = 16)]
    image_size: usize,
    #[arg(long, default_value_t = 4)]
    patch_size: usize,
    #[arg(long, default_value_t = 3)]
    channels: usize,
    #[arg(long, default_value_t = 0)]
    registers: usize,
    #[arg(long)]
    no_cls: bool,
    /// Planted spans `kind:s:e` (identity, linear, affine, gelu), 0-based,
    /// comma-separated.
    #[arg(long, default_value = "")]
    plant: String,
    #[arg(long, default_value_t = 0.5)]
    noise_scale: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 10)]
    classes: usize,
    #[arg(long, default_value_t = 200)]
    train_per_class: usize,
    #[arg(long, default_value_t = 50)]
    test_per_class: usize,
    #[arg(long, default_value_t = 2.0)]
    margin: f64,
    /// Translation of every class mean, in units of a fixed random image.
    #[arg(long, default_value_t = 0.0)]
    shift: f64,
    #[arg(long, default_value_t = 0)]
    data_seed: u64,
}

#[derive(Args, Debug, Serialize)]
struct CaptureArgs {
    #[arg(long)]
    model: PathBuf,
    #[command(flatten)]
    subset: SubsetArgs,
    #[command(flatten)]
    reduce: ReduceArgs,
}

#[derive(Args, Debug, Serialize)]
struct IdentifyArgs {
    #[arg(long)]
    model: PathBuf,
    #[command(flatten)]
    subset: SubsetArgs,
    #[command(flatten)]
    reduce: ReduceArgs,
    /// mse, cosine or cka.
    #[arg(long, default_value = "mse")]
    metric: String,
    #[arg(long, default_value_t = 1)]
    max_span_len: usize,
    #[arg(long, default_value_t = 10)]
    top_k: usize,
    /// Count a bias in the map cost when ranking.
    #[arg(long)]
    bias: bool,
}

#[derive(Args, Debug, Serialize)]
struct FitArgs {
    #[arg(long)]
    model: PathBuf,
    /// Spans `s:e` (0-based), comma-separated and non-overlapping.
    #[arg(long)]
    span: String,
    #[command(flatten)]
    subset: SubsetArgs,
    #[command(flatten)]
    fit: FitFlags,
}

#[derive(Args, Debug, Serialize)]
struct PatchArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    plan: PathBuf,
    #[command(flatten)]
    subset: SubsetArgs,
    #[command(flatten)]
    reduce: ReduceArgs,
}

#[derive(Args, Debug, Serialize)]
struct EvalArgs {
    #[arg(long)]
    model: PathBuf,
    /// Plan to evaluate next to the original model.
    #[arg(long)]
    plan: Option<PathBuf>,
    #[arg(long)]
    train: String,
    #[arg(long)]
    test: String,
    #[command(flatten)]
    probe: ProbeFlags,
}

#[derive(Args, Debug, Serialize)]
struct GeneralizeArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    span: String,
    /// Dataset the map is fitted on.
    #[command(flatten)]
    fit_subset: SubsetArgs,
    /// Probe training split of the target dataset.
    #[arg(long)]
    train: String,
    #[arg(long)]
    test: String,
    #[command(flatten)]
    fit: FitFlags,
    #[command(flatten)]
    probe: ProbeFlags,
}

#[derive(Args, Debug, Serialize)]
struct DriftArgs {
    #[arg(long)]
    model: PathBuf,
    #[command(flatten)]
    subset: SubsetArgs,
    #[command(flatten)]
    reduce: ReduceArgs,
    #[command(flatten)]
    fit: FitFlags,
}

#[derive(Args, Debug, Serialize)]
struct PcaArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    plan: PathBuf,
    #[command(flatten)]
    subset: SubsetArgs,
    #[arg(long, default_value_t = 2)]
    k: usize,
    #[arg(long, default_value = "cls")]
    probe_feature: String,
}

#[derive(Args, Debug, Serialize)]
struct CompareArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    spans: String,
    #[command(flatten)]
    subset: SubsetArgs,
    /// Samples used to measure last-block drift.
    #[arg(long, default_value_t = 500)]
    drift_samples: usize,
    #[command(flatten)]
    reduce: ReduceArgs,
    #[command(flatten)]
    fit: FitFlags,
    #[arg(long, default_value_t = 300)]
    steps: usize,
    #[arg(long, default_value_t = 1e-3)]
    lr: f64,
    /// Rows per training step of the MLP approximators.
    #[arg(long, default_value_t = 256)]
    train_batch: usize,
    #[arg(long, default_value_t = 0.1)]
    dropout_p: f64,
}

fn exit_code(err: &anyhow::Error) -> u8 {
    match err.downcast_ref::<Error>() {
        Some(Error::Argument(_) | Error::Plan(_) | Error::Spec(_)) => 2,
        Some(Error::Numeric(_)) => 4,
        Some(Error::Format(_) | Error::Io { .. } | Error::Dimension(_)) => 3,
        None => 3,
    }
}

fn init_threads() -> anyhow::Result<()> {
    if let Ok(v) = std::env::var("TBA_THREADS") {
        let n: usize = v
            .parse()
            .map_err(|_| Error::Argument(format!("TBA_THREADS={v:?} is not a thread count")))?;
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = init_threads().and_then(|_| commands::run(&cli.command, &cli.out_dir));
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
