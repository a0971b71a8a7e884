use std::path::PathBuf;
use std::process::ExitCode;
use std::sync::atomic::{AtomicBool, Ordering};

use clap::{Parser, Subcommand};
use hgpclust::app;
use hgpclust::exit;
use hgpclust::predict::{parse_grid, PredictMode, PredictRequest};

static INTERRUPTED: AtomicBool = AtomicBool::new(false);

#[derive(Parser)]
#[command(name = "hgpclust", version, about = "Cluster grouped time series with hierarchical Gaussian processes")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic benchmark (data.csv, truth.csv).
    Synth {
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Fit the model and write a result bundle.
    Fit {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Race optimizer modes over repeated restarts.
    Compare {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        restarts: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Predict from a bundle on a grid `start:stop:num`.
    Predict {
        #[arg(long)]
        bundle: PathBuf,
        #[arg(long)]
        grid: String,
        /// cluster-mean, existing-group or new-group
        #[arg(long)]
        mode: PredictMode,
        #[arg(long)]
        cluster: Option<usize>,
        #[arg(long)]
        group: Option<String>,
        /// Output CSV; stdout if omitted.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn run(command: Command) -> hgpclust::Result<u8> {
    match command {
        Command::Synth { seed, out } => app::synth(seed, &out),
        Command::Fit { data, config, out } => {
            // A second Ctrl-C falls through to the default handler.
            let _ = ctrlc::set_handler(|| {
                if INTERRUPTED.swap(true, Ordering::SeqCst) {
                    std::process::exit(130);
                }
            });
            app::run_fit(&data, &config, &out, Some(&INTERRUPTED))
        }
        Command::Compare {
            data,
            config,
            restarts,
            out,
        } => app::run_compare(&data, &config, restarts, &out),
        Command::Predict {
            bundle,
            grid,
            mode,
            cluster,
            group,
            out,
        } => {
            let req = PredictRequest {
                grid: parse_grid(&grid)?,
                cluster,
                group,
            };
            app::run_predict(&bundle, mode, &req, out.as_deref())
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { exit::VALIDATION } else { exit::SUCCESS });
        }
    };
    match run(cli.command) {
        Ok(code) => {
            if code == exit::NOT_CONVERGED {
                eprintln!("warning: the run did not converge; results were written");
            }
            ExitCode::from(code)
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
