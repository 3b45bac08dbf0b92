use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

mod commands;
mod manifest;

#[derive(Parser, Debug)]
#[command(name = "sleepcbm", version, about = "Concept-bottleneck sleep apnea estimation from oximetry")]
pub struct Cli {
    /// Experiment configuration JSON; missing fields take defaults.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,

    /// Overrides the seed for splits, arms and model initialisation
    /// (for `synth`, the generator seed).
    #[arg(long, global = true)]
    pub seed: Option<u64>,

    #[arg(long, global = true, default_value = "sleepcbm_out")]
    pub out_dir: PathBuf,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Args, Debug, Clone)]
#[group(required = true, multiple = false)]
pub struct StudySource {
    /// One study bundle directory.
    #[arg(long)]
    pub study: Option<PathBuf>,
    /// Cohort directory with manifest.csv.
    #[arg(long)]
    pub cohort: Option<PathBuf>,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Writes a synthetic cohort (bundles plus manifest.csv) to the output directory.
    Synth {
        #[arg(long)]
        n_studies: Option<usize>,
    },
    /// Writes the model-ready signal of each study.
    Preprocess {
        #[command(flatten)]
        source: StudySource,
    },
    /// Writes reference concepts computed from annotated events.
    Oracle {
        #[command(flatten)]
        source: StudySource,
    },
    /// Trains the concept model on the configured cohort.
    TrainSlam {
        /// Cohort directory overriding the configured cohort.
        #[arg(long)]
        cohort: Option<PathBuf>,
    },
    /// Trains the AHI regressor from a concept CSV and the cohort's clinical records.
    TrainReg {
        #[arg(long)]
        concepts: PathBuf,
        #[arg(long)]
        cohort: Option<PathBuf>,
    },
    /// Predicts concepts and saliency, and AHI when a regressor is given.
    Predict {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        regressor: Option<PathBuf>,
        #[command(flatten)]
        source: StudySource,
    },
    /// Scores a prediction CSV.
    Evaluate {
        #[arg(long)]
        predictions: PathBuf,
    },
    /// Full pipeline: concept model, regressor, in- and out-of-distribution reports.
    Run {
        #[command(flatten)]
        slam: SlamReuse,
    },
    /// Runs one ablation protocol.
    Ablate {
        kind: AblationKind,
        #[command(flatten)]
        slam: SlamReuse,
    },
}

#[derive(Args, Debug, Clone)]
pub struct SlamReuse {
    /// Trained concept model to reuse instead of training one.
    #[arg(long)]
    pub slam_model: Option<PathBuf>,
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
pub enum AblationKind {
    Corruption,
    Sweep,
    Intervention,
    Fusion,
    Importance,
    Bmi,
}

impl AblationKind {
    pub fn name(self) -> &'static str {
        match self {
            AblationKind::Corruption => "corruption",
            AblationKind::Sweep => "sweep",
            AblationKind::Intervention => "intervention",
            AblationKind::Fusion => "fusion",
            AblationKind::Importance => "importance",
            AblationKind::Bmi => "bmi",
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match commands::run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_validation() { 1 } else { 2 })
        }
    }
}
