use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

mod commands;

#[derive(Parser)]
#[command(name = "melflow", version, about = "Flow-matching mel-spectrogram refiner")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Build a paired clean/distorted dataset and its manifest.
    Simulate {
        #[arg(long)]
        config: PathBuf,
    },
    /// Train the estimator on the manifest named in the config.
    Train {
        #[arg(long)]
        config: PathBuf,
    },
    /// Refine one recording.
    Refine {
        input: PathBuf,
        output: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Euler steps from prior to data [default: flow.n_steps, 64].
        #[arg(long)]
        steps: Option<usize>,
        /// Config supplying the dsp section; defaults apply without it.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Also write the refined log-mel as text.
        #[arg(long)]
        mel_out: Option<PathBuf>,
    },
    /// Score distorted and refined audio against clean references.
    Eval {
        manifest: PathBuf,
        report: PathBuf,
        /// Refine each distorted file with this checkpoint.
        #[arg(long, required_unless_present = "refined_dir", conflicts_with = "refined_dir")]
        checkpoint: Option<PathBuf>,
        /// Read refined audio from `<dir>/<id>.wav` instead of refining.
        #[arg(long)]
        refined_dir: Option<PathBuf>,
        /// Save refined audio as `<dir>/<id>.wav`.
        #[arg(long)]
        write_refined: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Euler steps [default: flow.n_steps, 64].
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Render a WAV file or a text mel as a spectrogram PNG.
    Plot { input: PathBuf, output: PathBuf },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Simulate { config } => commands::simulate(&config),
        Command::Train { config } => commands::train(&config),
        Command::Refine {
            input,
            output,
            checkpoint,
            seed,
            steps,
            config,
            mel_out,
        } => commands::refine(&commands::RefineArgs {
            input,
            output,
            checkpoint,
            seed,
            steps,
            config,
            mel_out,
        }),
        Command::Eval {
            manifest,
            report,
            checkpoint,
            refined_dir,
            write_refined,
            seed,
            steps,
            config,
        } => commands::eval(&commands::EvalArgs {
            manifest,
            report,
            checkpoint,
            refined_dir,
            write_refined,
            seed,
            steps,
            config,
        }),
        Command::Plot { input, output } => commands::plot(&input, &output),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let msg = format!("{e:#}").replace('\n', " ");
            eprintln!("melflow: {msg}");
            ExitCode::FAILURE
        }
    }
}
