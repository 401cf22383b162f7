//! `frs`: data generation, training, distillation, evaluation and analysis.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use frs_core::Error;

#[derive(Parser)]
#[command(name = "frs", version, about = "Feature-richness-score distillation lab")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
pub struct Common {
    /// JSON config file; flags override its values.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory for every artifact of the run.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Clone)]
pub struct DistillFlags {
    #[arg(long)]
    pub alpha: Option<f64>,
    #[arg(long)]
    pub beta: Option<f64>,
    /// Distilled modules: `fpn`, `head` or `fpn,head`.
    #[arg(long)]
    pub modules: Option<String>,
    #[arg(long)]
    pub iters: Option<usize>,
}

#[derive(Subcommand)]
pub enum Command {
    /// Generate a synthetic dataset.
    GenData {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 1000)]
        count: usize,
        /// Fraction of images holding an unlabeled lookalike.
        #[arg(long)]
        rho: Option<f64>,
        /// Also write PPM previews.
        #[arg(long)]
        ppm: bool,
    },
    /// Train the teacher detector.
    TrainTeacher {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        iters: Option<usize>,
    },
    /// Train the student detector without distillation.
    TrainStudent {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        iters: Option<usize>,
    },
    /// Train a student against a frozen teacher.
    Distill {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        /// Teacher checkpoint (`.frst` with its `.json` sidecar).
        #[arg(long)]
        teacher: PathBuf,
        #[command(flatten)]
        flags: DistillFlags,
        /// Restrict FPN distillation to these regions, e.g. `TP,FP`.
        #[arg(long)]
        regions: Option<String>,
        #[arg(long)]
        tau: Option<f64>,
    },
    /// Evaluate a checkpoint on the validation split.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Region partition statistics of a teacher on the validation split.
    AnalyzeRegions {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        teacher: PathBuf,
        #[arg(long)]
        tau: Option<f64>,
    },
    /// Write a teacher's masks for one validation image as PGM heatmaps.
    ExportMasks {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        teacher: PathBuf,
        /// Index into the validation split.
        #[arg(long, default_value_t = 0)]
        index: usize,
    },
    /// Compare teacher mask values on lookalikes and on plain background.
    ProbeLookalike {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        teacher: PathBuf,
    },
    /// Distill one student under several teachers.
    SweepTeachers {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        /// Comma-separated teacher checkpoints.
        #[arg(long, value_delimiter = ',', required = true)]
        teachers: Vec<PathBuf>,
        #[command(flatten)]
        flags: DistillFlags,
    },
    /// Finite-difference gradient check of every op and composite loss.
    Gradcheck {
        /// Single seed; the default checks seeds 0, 1 and 2.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

/// 1 for invalid input or configuration, 2 for failures while running.
fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) | Error::ParamShape { .. } | Error::MissingParam(_) | Error::UnexpectedParam(_) => 1,
        _ => 2,
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match commands::run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
