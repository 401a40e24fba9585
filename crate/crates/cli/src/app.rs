use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

use crate::config::{ConfigError, Overrides, PipelineConfig};
use crate::pipeline::{Pipeline, Stage};
use crate::synth::{self, SynthError, SynthOptions};

pub const EXIT_OK: i32 = 0;
pub const EXIT_VALIDATION: i32 = 1;
pub const EXIT_RUNTIME: i32 = 2;

/// Environment variables capping the worker thread count, in priority order.
pub const THREAD_VARS: [&str; 2] = ["SETTLEMAP_THREADS", "TOOL_THREADS"];

#[derive(Debug, Parser)]
#[command(name = "settlemap", version, about = "Map newly emerged informal settlements from multispectral time series")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct StageArgs {
    /// Pipeline configuration (JSON).
    #[arg(long)]
    config: PathBuf,
    /// Re-run even when outputs are up to date.
    #[arg(long)]
    force: bool,
    /// Override the configured global seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Override the configured output directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct SynthArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Raster edge in pixels.
    #[arg(long, default_value_t = 300)]
    size: usize,
    #[arg(long, default_value_t = 9)]
    municipalities: usize,
    /// Planted settlements per municipality.
    #[arg(long, default_value_t = 5)]
    settlements: usize,
    #[arg(long, default_value_t = 3)]
    scenes_per_epoch: usize,
    /// Negatives per municipality (capped to what the grids hold).
    #[arg(long, default_value_t = 30_000)]
    negatives: usize,
    /// Random forest size written into the generated config.
    #[arg(long, default_value_t = 100)]
    trees: usize,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Per-epoch median composites.
    Composite(StageArgs),
    /// Spectral index rasters.
    Features(StageArgs),
    /// Labelled training table.
    Sample(StageArgs),
    /// Fit every configured model on the full table.
    Train(StageArgs),
    /// Leave-one-municipality-out precision/recall curves.
    Evaluate(StageArgs),
    /// Probability maps.
    Predict(StageArgs),
    /// Score 500 m grid cells.
    Rank(StageArgs),
    /// Candidate cells as GeoJSON.
    Export(StageArgs),
    /// Every stage in order.
    All(StageArgs),
    /// Write a synthetic fixture with a ready-to-run config.
    Synth(SynthArgs),
}

fn configure_threads() {
    let cap = THREAD_VARS
        .iter()
        .find_map(|v| std::env::var(v).ok())
        .and_then(|v| v.trim().parse::<usize>().ok())
        .filter(|&n| n > 0);
    if let Some(n) = cap {
        // Fails only if a pool already exists, e.g. on repeated in-process calls.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
}

fn run_stages(args: &StageArgs, stages: &[Stage]) -> anyhow::Result<()> {
    let overrides = Overrides {
        seed: args.seed,
        output_dir: args.out.clone(),
    };
    let cfg = PipelineConfig::load(&args.config, &overrides)?;
    let mut pipeline = Pipeline::new(cfg, args.force);
    let result = stages.iter().try_for_each(|&s| pipeline.run_stage(s));
    pipeline.write_summary()?;
    result
}

fn run_synth(a: &SynthArgs) -> anyhow::Result<()> {
    let opts = SynthOptions {
        seed: a.seed,
        size: a.size,
        municipalities: a.municipalities,
        settlements: a.settlements,
        scenes_per_epoch: a.scenes_per_epoch,
        negatives: a.negatives,
        trees: a.trees,
    };
    let summary = synth::generate(&a.out, &opts)?;
    log::info!(
        "wrote {} municipalities, {} negatives each; config at {}",
        summary.municipalities.len(),
        summary.negatives_per_municipality,
        summary.config.display()
    );
    println!("{}", summary.config.display());
    Ok(())
}

/// Parses `args` (including the program name) and runs the command,
/// returning the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_VALIDATION } else { EXIT_OK };
        }
    };
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp_millis()
        .try_init();
    configure_threads();
    let result = match &cli.command {
        Command::Composite(a) => run_stages(a, &[Stage::Composite]),
        Command::Features(a) => run_stages(a, &[Stage::Features]),
        Command::Sample(a) => run_stages(a, &[Stage::Sample]),
        Command::Train(a) => run_stages(a, &[Stage::Train]),
        Command::Evaluate(a) => run_stages(a, &[Stage::Evaluate]),
        Command::Predict(a) => run_stages(a, &[Stage::Predict]),
        Command::Rank(a) => run_stages(a, &[Stage::Rank]),
        Command::Export(a) => run_stages(a, &[Stage::Export]),
        Command::All(a) => run_stages(a, &Stage::ALL),
        Command::Synth(a) => run_synth(a),
    };
    match result {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e:#}");
            let validation = e.downcast_ref::<ConfigError>().is_some()
                || matches!(e.downcast_ref::<SynthError>(), Some(SynthError::Degenerate(_)));
            if validation {
                EXIT_VALIDATION
            } else {
                EXIT_RUNTIME
            }
        }
    }
}
