//! Binary entry point: argument parsing, thread-pool setup, and the
//! mapping from library errors to process exit codes (0 success,
//! 2 validation or input error, 3 numerical failure, 4 gradient check
//! over tolerance).

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use blochdesign::Error;
use blochdesign_cli::commands;

#[derive(Parser)]
#[command(name = "blochdesign", version, about = "Joint RF and gradient waveform design")]
struct Cli {
    /// Cap the voxel-parallel worker count (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Design a waveform from a JSON config and export the results.
    Design {
        #[arg(long)]
        config: PathBuf,
        /// Output directory; overrides out_dir from the config.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Forward-simulate a pulse file over a grid file.
    Simulate {
        #[arg(long)]
        grid: PathBuf,
        #[arg(long)]
        pulse: PathBuf,
        /// Starting magnetization file; thermal equilibrium when omitted.
        #[arg(long)]
        m0: Option<PathBuf>,
        #[arg(long, default_value = ".")]
        out: PathBuf,
    },
    /// Compare the analytic waveform gradient against finite differences
    /// on the configured problem's initial pulse.
    Gradcheck {
        #[arg(long)]
        config: PathBuf,
        /// Waveform components to probe; probes every component when omitted.
        #[arg(long)]
        samples: Option<usize>,
        /// Central-difference step in Gauss (RF) or G/cm (gradient).
        #[arg(long, default_value_t = 1e-6)]
        h: f64,
        /// Sampling seed; overrides the config seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Evaluate a pulse under gradient delays and off-resonance scaling.
    Eval {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        pulse: PathBuf,
        /// Perturbation as <delay_samples>:<offres_scale>, repeatable.
        /// Defaults to 0:1, -1:1, 1:1, and 0:3.
        #[arg(long = "perturb")]
        perturbations: Vec<String>,
        #[arg(long, default_value = ".")]
        out: PathBuf,
    },
    /// Build the configured initial pulse and write it out.
    Init {
        #[arg(long)]
        config: PathBuf,
        /// Output directory; overrides out_dir from the config.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn exit_code(error: &Error) -> u8 {
    match error {
        Error::Numerical(_) => 3,
        _ => 2,
    }
}

fn run(cli: Cli) -> blochdesign::Result<i32> {
    if let Some(threads) = cli.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build_global()
            .map_err(|e| Error::Validation(format!("thread pool setup failed: {e}")))?;
    }
    match cli.command {
        Command::Design { config, out } => commands::cmd_design(&config, out),
        Command::Simulate {
            grid,
            pulse,
            m0,
            out,
        } => commands::cmd_simulate(&grid, &pulse, m0.as_deref(), &out),
        Command::Gradcheck {
            config,
            samples,
            h,
            seed,
        } => commands::cmd_gradcheck(&config, samples, h, seed),
        Command::Eval {
            config,
            pulse,
            perturbations,
            out,
        } => commands::cmd_eval(&config, &pulse, &perturbations, &out),
        Command::Init { config, out } => commands::cmd_init(&config, out),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => ExitCode::from(code as u8),
        Err(error) => {
            eprintln!("error: {error}");
            ExitCode::from(exit_code(&error))
        }
    }
}
