mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use log::info;
use wavecal::datamodel::{Axis, Frame};
use wavecal::error::ErrorClass;

#[derive(Debug, Parser)]
#[command(name = "wavecal", version, about = "Multi-wave validation sampling and calibrated estimation")]
pub struct Cli {
    /// Master seed; every random step derives its stream from it.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic population with known truth.
    Simulate(SimulateArgs),
    /// Functional PCA of the weight histories.
    #[command(subcommand)]
    Fpca(FpcaCommand),
    /// Build and run the stratified multi-wave design.
    #[command(subcommand)]
    Design(DesignCommand),
    /// Fit the analysis model with the selected estimators.
    Estimate(EstimateArgs),
    /// Monte Carlo comparison of the estimators on simulated data.
    Report(ReportArgs),
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    /// JSON simulation config; defaults apply to missing fields.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub population: Option<usize>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Subcommand)]
pub enum FpcaCommand {
    /// Estimate the mean, eigenfunctions and noise variance.
    Fit {
        #[arg(long)]
        measurements: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        grid_size: Option<usize>,
        #[arg(long)]
        fve: Option<f64>,
    },
    /// Scores and weekly gain per subject.
    Score {
        #[arg(long)]
        measurements: PathBuf,
        #[arg(long)]
        eigensystem: PathBuf,
        /// Gestation length in days used for the gain.
        #[arg(long, default_value_t = wavecal::fpca::ASSUMED_GESTATION)]
        gestation: f64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Measurements outside the pointwise prediction band.
    Flag {
        #[arg(long)]
        measurements: PathBuf,
        #[arg(long)]
        eigensystem: PathBuf,
        #[arg(long, default_value_t = 0.95)]
        level: f64,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum FrameArg {
    Obesity,
    Asthma,
}

impl From<FrameArg> for Frame {
    fn from(f: FrameArg) -> Frame {
        match f {
            FrameArg::Obesity => Frame::Obesity,
            FrameArg::Asthma => Frame::Asthma,
        }
    }
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum AxisArg {
    Event,
    FollowUp,
    Exposure,
    TotalGain,
    Asthma,
}

impl From<AxisArg> for Axis {
    fn from(a: AxisArg) -> Axis {
        match a {
            AxisArg::Event => Axis::Event,
            AxisArg::FollowUp => Axis::FollowUp,
            AxisArg::Exposure => Axis::Exposure,
            AxisArg::TotalGain => Axis::TotalGain,
            AxisArg::Asthma => Axis::Asthma,
        }
    }
}

#[derive(Debug, Subcommand)]
pub enum DesignCommand {
    /// Create a ledger for one frame, optionally with initial strata.
    Init {
        #[arg(long)]
        dyads: PathBuf,
        #[arg(long, value_enum)]
        frame: FrameArg,
        /// JSON list of stratification levels; the built-in levels for the
        /// frame when absent.
        #[arg(long)]
        strata: Option<PathBuf>,
        /// Start from the root stratum only.
        #[arg(long, conflicts_with = "strata")]
        unstratified: bool,
        #[arg(long)]
        out: PathBuf,
    },
    /// Allocate the next wave and close strata that are already full.
    Allocate {
        #[arg(long)]
        dyads: PathBuf,
        #[arg(long)]
        ledger: PathBuf,
        #[arg(long, value_enum)]
        frame: Option<FrameArg>,
        #[arg(long)]
        target: usize,
        #[arg(long)]
        wave: u32,
        /// `id,h` table; computed from the data when absent.
        #[arg(long)]
        influence: Option<PathBuf>,
        /// Minimum per stratum for a first wave.
        #[arg(long, default_value_t = 2)]
        min_per_stratum: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Split a leaf at cut points on one axis.
    Split {
        #[arg(long)]
        dyads: PathBuf,
        #[arg(long)]
        ledger: PathBuf,
        #[arg(long)]
        stratum: String,
        #[arg(long, value_enum)]
        axis: AxisArg,
        #[arg(long, value_delimiter = ',', required = true)]
        cuts: Vec<f64>,
    },
    /// Exclude a leaf from further waves.
    Close {
        #[arg(long)]
        ledger: PathBuf,
        #[arg(long)]
        stratum: String,
    },
    /// Draw the allocated wave.
    Draw {
        #[arg(long)]
        dyads: PathBuf,
        #[arg(long)]
        ledger: PathBuf,
        #[arg(long)]
        allocation: PathBuf,
        /// Fully validated records (e.g. `truth.csv` from `simulate`); drawn
        /// records get their validated values written into the dyads file.
        #[arg(long)]
        reveal: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Method {
    All,
    Ipw,
    Raking,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum AuxArg {
    Naive,
    Mi,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum FramesArg {
    Single,
    Multi,
}

#[derive(Debug, Args)]
pub struct EstimateArgs {
    #[arg(long)]
    pub dyads: PathBuf,
    #[arg(long)]
    pub obesity_ledger: PathBuf,
    #[arg(long)]
    pub asthma_ledger: Option<PathBuf>,
    /// Analysis model: Cox for obesity, logistic for asthma.
    #[arg(long, value_enum, default_value = "obesity")]
    pub analysis: FrameArg,
    #[arg(long, value_enum, default_value = "all")]
    pub method: Method,
    #[arg(long, value_enum, default_value = "naive")]
    pub aux: AuxArg,
    #[arg(long, value_enum, default_value = "multi")]
    pub frame: FramesArg,
    #[arg(long, default_value_t = 100)]
    pub imputations: usize,
    /// Leave out the finite-population correction.
    #[arg(long)]
    pub no_fpc: bool,
    /// Naive raking on the phase-1 influence of every coefficient.
    #[arg(long)]
    pub full_influence: bool,
    /// Keep observed values of validated records instead of re-imputing them.
    #[arg(long)]
    pub pass_through: bool,
    /// With `--eigensystem`, lets imputed gestation lengths update the exposure.
    #[arg(long, requires = "eigensystem")]
    pub measurements: Option<PathBuf>,
    #[arg(long, requires = "measurements")]
    pub eigensystem: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub weights_out: Option<PathBuf>,
    #[arg(long)]
    pub mi_out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// JSON design spec; defaults apply to missing fields.
    #[arg(long)]
    pub design: Option<PathBuf>,
    #[arg(long)]
    pub population: Option<usize>,
    #[arg(long, default_value_t = 500)]
    pub replicates: usize,
    #[arg(long)]
    pub out: PathBuf,
}

fn exit_code(class: ErrorClass) -> u8 {
    match class {
        ErrorClass::Io => 3,
        ErrorClass::Parse => 4,
        ErrorClass::Infeasible => 5,
        ErrorClass::Numerical => 6,
        ErrorClass::Invalid => 1,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    info!("configuration: {cli:?}");
    match commands::run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let class = e.class();
            eprintln!("error[{}]: {}", class.name(), e.to_string().replace('\n', " "));
            ExitCode::from(exit_code(class))
        }
    }
}
