mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use talon::ensemble::ModelWeights;
use talon::eval::AucNorm;
use talon::refine::DEFAULT_THRESHOLDS;
use talon::resize::Align;
use talon::{GridSpec, Subset};

/// Temporal action proposal decoding, refinement, ensembling and evaluation.
#[derive(Debug, Parser)]
#[command(name = "talon", version)]
struct Cli {
    /// Worker threads; 0 uses one per core.
    #[arg(long, global = true, env = "TALON_THREADS", default_value_t = 0)]
    threads: usize,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a seeded synthetic dataset.
    Synth(SynthArgs),
    /// Write ground-truth target bundles for every annotated video.
    GenLabels(GenLabelsArgs),
    /// Decode score bundles into ranked proposals.
    Decode(DecodeArgs),
    /// Gaussian soft-NMS over a proposal file.
    Nms(NmsArgs),
    /// Refine proposals through a cascade of regressors.
    Refine(RefineArgs),
    /// Fuse several models' bundles or proposal sets.
    Ensemble(EnsembleArgs),
    /// Weighted-logit ensemble classification.
    Classify(ClassifyArgs),
    /// AR@AN, AUC and mAP of a proposal file.
    Eval(EvalArgs),
}

#[derive(Debug, Args)]
struct SynthArgs {
    /// Directory receiving annotations.json, labels.json, bundles.tfnb and features.tfnf.
    #[arg(long)]
    out_dir: PathBuf,
    #[arg(long, default_value_t = 42)]
    seed: u64,
    /// Seed of the bundle noise; defaults to --seed.
    #[arg(long)]
    bundle_seed: Option<u64>,
    #[arg(long, default_value_t = 100)]
    videos: usize,
    #[arg(long, default_value_t = 10)]
    classes: usize,
    #[arg(long, default_value_t = 30.0)]
    min_duration: f64,
    #[arg(long, default_value_t = 120.0)]
    max_duration: f64,
    #[arg(long, default_value_t = 1)]
    min_actions: usize,
    #[arg(long, default_value_t = 4)]
    max_actions: usize,
    /// Endpoint jitter in grid cells.
    #[arg(long, default_value_t = 0.0)]
    boundary_noise: f64,
    /// Additive noise on every bundle value.
    #[arg(long, default_value_t = 0.0)]
    map_noise: f64,
    #[arg(long, default_value_t = 8)]
    channels: usize,
    #[arg(long, default_value_t = 1.0)]
    feature_noise: f64,
    #[arg(long, default_value_t = 1.5)]
    feature_signal: f64,
    /// Bundle grid size; ground truth is snapped to this grid.
    #[arg(long, default_value_t = GridSpec::DEFAULT_D)]
    d: usize,
    #[arg(long, default_value_t = 0.5)]
    train_fraction: f64,
    /// Also write logits.json and logit_labels.json, one model per margin.
    #[arg(long, value_delimiter = ',')]
    logit_margins: Vec<f64>,
    #[arg(long, default_value_t = 500)]
    logit_samples: usize,
}

#[derive(Debug, Args)]
struct AnnotationArgs {
    /// Annotation database JSON.
    #[arg(long)]
    annotations: PathBuf,
    /// Label-to-id JSON map; ids follow sorted label order when absent.
    #[arg(long)]
    label_index: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct GenLabelsArgs {
    #[command(flatten)]
    db: AnnotationArgs,
    #[arg(long, default_value_t = GridSpec::DEFAULT_D)]
    d: usize,
    /// Half-width of boundary regions as a fraction of the action length.
    #[arg(long, default_value_t = talon::targets::DEFAULT_EXPAND_RATIO)]
    expand_ratio: f64,
    /// Output bundle container; `-` for stdout.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct DecodeArgs {
    /// Score bundle container.
    #[arg(long)]
    bundles: PathBuf,
    #[command(flatten)]
    db: AnnotationArgs,
    #[arg(long, default_value_t = 1000)]
    max_candidates: usize,
    #[arg(long, default_value_t = 0.0)]
    min_score: f64,
    /// Only decode cells whose endpoints are boundary peaks.
    #[arg(long)]
    peaks_only: bool,
    /// Exponent on the product of the two confidence maps.
    #[arg(long, default_value_t = 0.5)]
    gamma: f64,
    /// Apply soft-NMS to the decoded candidates.
    #[arg(long)]
    nms: bool,
    #[command(flatten)]
    nms_opts: NmsOptArgs,
    /// Output proposal file (JSON lines); `-` for stdout.
    #[arg(long, default_value = "-")]
    out: PathBuf,
}

#[derive(Debug, Args, Clone, Copy)]
struct NmsOptArgs {
    /// Gaussian decay width.
    #[arg(long, default_value_t = 0.4)]
    sigma: f64,
    /// Stop once the best remaining score falls below this.
    #[arg(long, default_value_t = 1e-4)]
    nms_min_score: f64,
    /// Proposals kept per video.
    #[arg(long, default_value_t = 100)]
    top_k: usize,
}

#[derive(Debug, Args)]
struct NmsArgs {
    #[arg(long)]
    proposals: PathBuf,
    #[command(flatten)]
    nms_opts: NmsOptArgs,
    #[arg(long, default_value = "-")]
    out: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
enum FusionArg {
    Iou,
    Multiply,
}

#[derive(Debug, Args)]
struct RefineArgs {
    #[arg(long)]
    proposals: PathBuf,
    #[command(flatten)]
    db: AnnotationArgs,
    /// Feature container; required unless --oracle is given.
    #[arg(long)]
    features: Option<PathBuf>,
    /// Number of cascade stages.
    #[arg(long, default_value_t = DEFAULT_THRESHOLDS.len())]
    stages: usize,
    /// Per-stage IoU thresholds, strictly increasing.
    #[arg(long, value_delimiter = ',', default_values_t = DEFAULT_THRESHOLDS)]
    thresholds: Vec<f64>,
    /// RoI bins per proposal.
    #[arg(long, default_value_t = 16)]
    bins: usize,
    #[arg(long, default_value_t = 2)]
    samples_per_bin: usize,
    /// Context added on each side, as a fraction of the proposal length.
    #[arg(long, default_value_t = 0.5)]
    context: f64,
    /// How the predicted IoU becomes the new score.
    #[arg(long, value_enum, default_value_t = FusionArg::Iou)]
    fusion: FusionArg,
    /// Stage parameters JSON (array of per-stage heads).
    #[arg(long, conflicts_with_all = ["oracle", "fit"])]
    params: Option<PathBuf>,
    /// Use the ground-truth oracle moving each proposal this fraction toward its match.
    #[arg(long, conflicts_with = "fit")]
    oracle: Option<f64>,
    /// Fit linear heads on the training subset before refining.
    #[arg(long)]
    fit: bool,
    /// Ridge penalty for --fit.
    #[arg(long, default_value_t = 1e-3)]
    ridge: f64,
    /// Write fitted parameters here.
    #[arg(long, requires = "fit")]
    save_params: Option<PathBuf>,
    /// Skip the soft-NMS pass applied before the cascade.
    #[arg(long)]
    no_pre_nms: bool,
    /// Apply soft-NMS again after the cascade.
    #[arg(long)]
    post_nms: bool,
    #[command(flatten)]
    nms_opts: NmsOptArgs,
    /// Only refine videos of this subset.
    #[arg(long)]
    subset: Option<Subset>,
    #[arg(long, default_value = "-")]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct EnsembleArgs {
    /// Bundle containers, one per model.
    #[arg(long, value_delimiter = ',', conflicts_with = "proposals", required_unless_present = "proposals")]
    bundles: Vec<PathBuf>,
    /// Proposal files, one per model.
    #[arg(long, value_delimiter = ',')]
    proposals: Vec<PathBuf>,
    /// Model weights, e.g. 0.4,0.6; uniform when absent.
    #[arg(long)]
    weights: Option<ModelWeights>,
    /// Common grid size for bundle fusion.
    #[arg(long, default_value_t = GridSpec::DEFAULT_D)]
    target_d: usize,
    #[arg(long, default_value = "centers", value_parser = parse_align)]
    align: Align,
    /// tIoU at which proposals of different models are merged.
    #[arg(long, default_value_t = talon::ensemble::DEFAULT_MERGE_IOU)]
    merge_iou: f64,
    #[command(flatten)]
    nms_opts: NmsOptArgs,
    /// Grid-search bundle weights by AUC on --annotations.
    #[arg(long, requires = "annotations", requires = "bundles")]
    search: bool,
    #[arg(long, default_value_t = 0.1)]
    step: f64,
    #[arg(long)]
    annotations: Option<PathBuf>,
    #[arg(long)]
    label_index: Option<PathBuf>,
    /// Restrict the search to this subset.
    #[arg(long)]
    subset: Option<Subset>,
    #[arg(long, default_value = "-")]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct ClassifyArgs {
    /// Logits JSON of shape (models, samples, classes).
    #[arg(long)]
    logits: PathBuf,
    /// JSON array of true class ids.
    #[arg(long)]
    labels: Option<PathBuf>,
    #[arg(long, conflicts_with = "fit")]
    weights: Option<ModelWeights>,
    /// Fit adaptive weights by gradient descent on --labels.
    #[arg(long, requires = "labels")]
    fit: bool,
    #[arg(long, default_value_t = 0.01)]
    lr: f64,
    #[arg(long, default_value_t = 100)]
    iters: usize,
    /// Classes reported per sample.
    #[arg(long, default_value_t = 5)]
    top_k: usize,
    #[arg(long, default_value = "-")]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct EvalArgs {
    #[arg(long)]
    proposals: PathBuf,
    #[command(flatten)]
    db: AnnotationArgs,
    /// Evaluate only this subset.
    #[arg(long)]
    subset: Option<Subset>,
    #[arg(long, default_value_t = 100)]
    max_an: usize,
    /// tIoU thresholds as `lo:step:hi` or a comma-separated list.
    #[arg(long, default_value = "0.5:0.05:0.95", value_parser = parse_tious)]
    tious: TiouGrid,
    #[arg(long, default_value = "mean", value_parser = parse_auc_norm)]
    auc_norm: AucNorm,
    /// Emit JSON instead of a table.
    #[arg(long)]
    json: bool,
    /// Write the AR-AN curve as CSV here.
    #[arg(long)]
    curve: Option<PathBuf>,
    #[arg(long, default_value = "-")]
    out: PathBuf,
}

#[derive(Debug, Clone, PartialEq)]
struct TiouGrid(Vec<f64>);

/// Range endpoints are inclusive; values are rounded to 12 decimals so that
/// `0.5:0.05:0.95` yields the same doubles as the literal list.
fn parse_tious(s: &str) -> Result<TiouGrid, String> {
    let num = |t: &str| t.trim().parse::<f64>().map_err(|e| format!("{t:?}: {e}"));
    let values = match s.split(':').collect::<Vec<_>>()[..] {
        [lo, step, hi] => {
            let (lo, step, hi) = (num(lo)?, num(step)?, num(hi)?);
            if !(step > 0.0 && hi >= lo) {
                return Err(format!("range {s:?} needs step > 0 and hi >= lo"));
            }
            let n = ((hi - lo) / step + 1e-9).floor() as usize;
            (0..=n).map(|k| ((lo + k as f64 * step) * 1e12).round() / 1e12).collect()
        }
        [list] => list.split(',').map(num).collect::<Result<Vec<_>, _>>()?,
        _ => return Err(format!("expected lo:step:hi or a list, got {s:?}")),
    };
    if let Some(t) = values.iter().find(|t| !(**t > 0.0 && **t <= 1.0)) {
        return Err(format!("tIoU threshold {t} outside (0, 1]"));
    }
    Ok(TiouGrid(values))
}

fn parse_align(s: &str) -> Result<Align, talon::Error> {
    s.parse()
}

fn parse_auc_norm(s: &str) -> Result<AucNorm, talon::Error> {
    s.parse()
}

/// I/O and malformed-input failures exit with 2, everything else with 1.
fn exit_code(err: &anyhow::Error) -> u8 {
    let input = err.chain().any(|e| match e.downcast_ref::<talon::Error>() {
        Some(t) => t.is_input_error(),
        None => e.is::<std::io::Error>(),
    });
    if input {
        2
    } else {
        1
    }
}

/// The error chain joined by `: `, skipping causes already quoted by their parent.
fn describe(err: &anyhow::Error) -> String {
    let mut parts: Vec<String> = Vec::new();
    for cause in err.chain() {
        let msg = cause.to_string();
        if parts.last().is_some_and(|prev| prev.ends_with(&msg)) {
            continue;
        }
        parts.push(msg);
    }
    parts.join(": ")
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    let result = rayon::ThreadPoolBuilder::new()
        .num_threads(cli.threads)
        .build()
        .map_err(anyhow::Error::from)
        .and_then(|pool| pool.install(|| commands::run(cli.command)));
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", describe(&e));
            ExitCode::from(exit_code(&e))
        }
    }
}
