use std::path::PathBuf;
use std::process::ExitCode;

use cats_cli::{configure_threads, evaluate, phantoms, predict, train, PredictArgs};
use clap::{Parser, Subcommand};

#[derive(Parser)]
#[command(name = "cats", version, about = "Dual-encoder 3D segmentation: train, predict, evaluate")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train from a TOML run config.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Overrides `train.seed`.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Segment one volume by sliding-window inference.
    Predict {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Window extents `X,Y,Z`; defaults to the training patch.
        #[arg(long, value_parser = parse_window)]
        window: Option<[usize; 3]>,
        /// Fractional tile overlap in [0, 1).
        #[arg(long, default_value_t = 0.5)]
        overlap: f64,
    },
    /// Dice, ASD and HD95 per case and class.
    Evaluate {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        truth: PathBuf,
        /// Comma-separated class indices, e.g. `1,2`.
        #[arg(long, value_delimiter = ',', required = true)]
        classes: Vec<u16>,
        /// Where to write the per-case TSV; defaults to `<pred>/metrics.tsv`.
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Generate synthetic phantoms from a TOML spec.
    Phantoms {
        #[arg(long)]
        spec: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

fn parse_window(s: &str) -> Result<[usize; 3], String> {
    let parts: Vec<usize> = s
        .split(',')
        .map(|p| p.trim().parse::<usize>().map_err(|e| format!("`{}`: {}", p, e)))
        .collect::<Result<_, _>>()?;
    parts.try_into().map_err(|_| format!("expected three extents X,Y,Z, got `{}`", s))
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let threads = std::env::var("CATS_NUM_THREADS").ok();
    let result = configure_threads(threads.as_deref()).and_then(|_| match cli.command {
        Command::Train { config, seed } => train(&config, seed),
        Command::Predict { ckpt, input, out, window, overlap } => {
            predict(&PredictArgs { checkpoint: ckpt, input, output: out, window, overlap })
        }
        Command::Evaluate { pred, truth, classes, report } => evaluate(&pred, &truth, &classes, report.as_deref()),
        Command::Phantoms { spec, out } => phantoms(&spec, &out),
    });
    match result {
        Ok(message) => {
            println!("{}", message);
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {}", e);
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
