use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use spar::bench::InferenceMode;
use spar::cli::{self, RunConfig};

#[derive(Parser)]
#[command(
    name = "spar",
    about = "Any-resolution ViT toolkit: teacher precomputation, feature \
             distillation, open-vocabulary evaluation and inference benchmarks"
)]
struct Args {
    /// Run configuration file (`section.key = value` lines).
    #[arg(long, global = true, default_value = "spar.cfg")]
    config: PathBuf,

    /// Overrides `train.seed` from the config.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Worker threads for window forwards (1 = sequential).
    #[arg(long, global = true, default_value_t = 1)]
    threads: usize,

    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum EvalMode {
    SinglePass,
    SlidingWindow,
}

#[derive(Subcommand)]
enum Command {
    /// Write a freshly initialized parameter checkpoint.
    InitParams,
    /// Precompute sliding-window teacher features into the store.
    Precompute,
    /// Distill the student against the stored teacher features.
    Train,
    /// Evaluate mIoU over aligned image/mask pairs.
    Eval {
        #[arg(long, value_enum, default_value = "single-pass")]
        mode: EvalMode,
    },
    /// Time a stride sweep and emit CSV (optionally an SVG scatter).
    Bench {
        /// Write a seconds-vs-metric scatter plot here.
        #[arg(long)]
        svg: Option<PathBuf>,
        /// Metric file (`stride,value`; stride 0 = single pass).
        #[arg(long)]
        metric_csv: Option<PathBuf>,
    },
    /// Project single-pass features onto the sliding-window PCA basis.
    PcaViz {
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

fn run(args: &Args) -> spar::Result<()> {
    let cfg = RunConfig::load(&args.config)?;
    let seed = args.seed.unwrap_or(cfg.train.train.seed);
    match &args.command {
        Command::InitParams => cli::cmd_init_params(&cfg, seed),
        Command::Precompute => cli::cmd_precompute(&cfg, seed, args.threads),
        Command::Train => cli::cmd_train(&cfg, seed, args.threads),
        Command::Eval { mode } => {
            let mode = match mode {
                EvalMode::SinglePass => InferenceMode::SinglePass,
                EvalMode::SlidingWindow => InferenceMode::SlidingWindow,
            };
            cli::cmd_eval(&cfg, mode, args.threads).map(|_| ())
        }
        Command::Bench { svg, metric_csv } => cli::cmd_bench(
            &cfg,
            seed,
            args.threads,
            svg.as_deref(),
            metric_csv.as_deref(),
        )
        .map(|_| ()),
        Command::PcaViz { image, out } => cli::cmd_pca_viz(&cfg, image, out, args.threads),
    }
}

fn main() -> ExitCode {
    let args = Args::parse();
    let outcome = std::panic::catch_unwind(|| run(&args));
    match outcome {
        Ok(Ok(())) => ExitCode::SUCCESS,
        Ok(Err(err)) => {
            eprintln!("error: {err}");
            ExitCode::from(cli::exit_code(&err) as u8)
        }
        Err(_) => {
            eprintln!("error: internal invariant violation");
            ExitCode::from(3)
        }
    }
}
