//! `spikeconv`: calibrate HG neurons, convert float blocks, run and compare
//! their spike-driven versions, sweep timesteps and report energy.

mod commands;
mod failure;
mod io;
mod report;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use spikeconv::calibration::HierarchyRule;
use spikeconv::energy::SopCounting;
use spikeconv::model::{EncoderKind, FfnKind};

use commands::{parse_range, CalibrateArgs, ConvertArgs, InitArgs, RunArgs};

#[derive(Parser)]
#[command(name = "spikeconv", version, about = "Spike-driven conversion of small transformer blocks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Fit an HG neuron to one nonlinearity and write its report.
    Calibrate {
        /// gelu, silu, exp, reciprocal, square or invsqrt.
        #[arg(long)]
        target: String,
        /// Input range as LO,HI.
        #[arg(long, value_parser = parse_range, allow_hyphen_values = true)]
        range: (f64, f64),
        /// Number of sub-ranges N.
        #[arg(long = "levels", default_value_t = 8)]
        subranges: usize,
        #[arg(long, default_value_t = 16)]
        steps: usize,
        /// Training samples M per sub-range (at least 64).
        #[arg(long, default_value_t = 4096)]
        samples: usize,
        /// Defaults to LAS_SEED, else 0.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, default_value = "curvature")]
        rule: HierarchyRule,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write a default toy config, random weights and optionally an input.
    Init {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        weights: PathBuf,
        /// Also write four sequences sampled from the calibration distribution.
        #[arg(long)]
        input: Option<PathBuf>,
        #[arg(long, default_value = "standard", value_parser = parse_ffn)]
        ffn: FfnKind,
        #[arg(long, default_value_t = 1)]
        layers: usize,
        #[arg(long)]
        causal: bool,
    },
    /// Calibrate every encoder and nonlinearity of a block.
    Convert {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        weights: PathBuf,
        /// JSON activation distribution replacing the config's.
        #[arg(long)]
        calib_dist: Option<PathBuf>,
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the spike block and write a JSON report.
    Run {
        #[command(flatten)]
        run: RunFlags,
        #[arg(long)]
        report: Option<PathBuf>,
        /// CSV file for the spike block output.
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Print the float-vs-spike deviation per layer.
    Compare {
        #[command(flatten)]
        run: RunFlags,
    },
    /// Emit timestep, mean_rel_err, sops, ratio as CSV.
    Sweep {
        #[command(flatten)]
        run: RunFlags,
        #[arg(long, value_delimiter = ',', default_value = "4,8,10,13,16")]
        steps_list: Vec<usize>,
        /// Write the CSV here instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Print the energy ratio of a run report.
    Energy {
        #[arg(long)]
        report: PathBuf,
    },
}

#[derive(Args)]
struct RunFlags {
    /// Directory written by `convert`.
    #[arg(long)]
    block: PathBuf,
    /// Header-less CSV, one token per row. Defaults to four sequences
    /// sampled with the block's input seed.
    #[arg(long)]
    input: Option<PathBuf>,
    /// Timesteps; defaults to the block's T.
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long, default_value = "oat")]
    encoder: EncoderKind,
    #[arg(long, default_value = "per-event", value_parser = parse_counting)]
    counting: SopCounting,
}

impl From<RunFlags> for RunArgs {
    fn from(f: RunFlags) -> Self {
        RunArgs {
            block: f.block,
            input: f.input,
            steps: f.steps,
            encoder: f.encoder,
            counting: f.counting,
        }
    }
}

fn parse_ffn(s: &str) -> Result<FfnKind, String> {
    match s {
        "standard" => Ok(FfnKind::Standard),
        "gated" => Ok(FfnKind::Gated),
        _ => Err("expected standard or gated".into()),
    }
}

fn parse_counting(s: &str) -> Result<SopCounting, String> {
    match s {
        "per-event" => Ok(SopCounting::PerEvent),
        "level-bits" => Ok(SopCounting::LevelBits),
        _ => Err("expected per-event or level-bits".into()),
    }
}

fn dispatch(cmd: Command) -> failure::CliResult<()> {
    match cmd {
        Command::Calibrate { target, range, subranges, steps, samples, seed, rule, out } => {
            commands::calibrate(CalibrateArgs { target, range, subranges, steps, samples, seed, rule, out })
        }
        Command::Init { config, weights, input, ffn, layers, causal } => {
            commands::init(InitArgs { config, weights, input, ffn, layers, causal })
        }
        Command::Convert { config, weights, calib_dist, out } => {
            commands::convert_cmd(ConvertArgs { config, weights, calib_dist, out })
        }
        Command::Run { run, report, output } => commands::run(run.into(), report, output),
        Command::Compare { run } => commands::compare(run.into()),
        Command::Sweep { run, steps_list, out } => commands::sweep(run.into(), &steps_list, out),
        Command::Energy { report } => commands::energy(&report),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match dispatch(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {f}");
            ExitCode::from(f.code as u8)
        }
    }
}
