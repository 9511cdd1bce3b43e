use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Debug, Parser)]
#[command(name = "opo-noise", version, about = "Quantum noise spectra of a triply resonant OPO with phonon phase noise")]
pub struct Cli {
    #[command(flatten)]
    pub common: Common,
    #[command(subcommand)]
    pub command: Command,
}

/// Flags accepted by every subcommand.
#[derive(Debug, Args)]
pub struct Common {
    /// Cavity and run configuration file.
    #[arg(long, global = true, value_name = "PATH")]
    pub config: Option<PathBuf>,
    /// Directory receiving the CSV outputs and the manifest.
    #[arg(long, global = true, value_name = "DIR", default_value = ".")]
    pub out: PathBuf,
    /// Master seed of stochastic runs; overrides `oracle.seed`.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Pump ratio P_in / P_th; overrides `opo.pump_ratio`.
    #[arg(long, global = true)]
    pub sigma: Option<f64>,
    /// Analysis frequency in Hz; overrides `opo.frequency_hz`.
    #[arg(long = "freq-hz", global = true, value_name = "HZ")]
    pub freq_hz: Option<f64>,
    /// File with the six `phonon.eta..` keys; takes precedence over the
    /// config.
    #[arg(long = "eta-file", global = true, value_name = "PATH")]
    pub eta_file: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Output covariance and its components at one operating point.
    Spectrum,
    /// Covariance, Duan and van Loock-Furusawa values along one axis.
    Sweep {
        /// Grid as name:start:stop:count, name one of pump_ratio, frequency,
        /// temperature, crystal_z.
        #[arg(long, value_name = "SPEC")]
        axis: String,
    },
    /// Monte-Carlo spectrum compared entry by entry with an analytic target.
    Oracle {
        #[arg(long, value_enum, default_value_t = Regime::Opo)]
        regime: Regime,
        #[arg(long, value_enum, default_value_t = Target::Model)]
        target: Target,
        /// Largest accepted |z| per entry.
        #[arg(long, default_value_t = 3.0)]
        tolerance: f64,
    },
    /// Fit phonon-noise parameters to measured data.
    #[command(subcommand)]
    Fit(FitCommand),
    /// Re-run the command recorded in a manifest and check the outputs match.
    Replay {
        #[arg(long, value_name = "PATH")]
        manifest: PathBuf,
    },
}

#[derive(Debug, Subcommand)]
pub enum FitCommand {
    /// Self-coupling eta_jj from phase variance against power.
    EtaDiag {
        #[command(flatten)]
        data: DataArg,
        #[arg(long, default_value_t = 0)]
        mode: usize,
        /// Fit an intercept as well (diagnostic).
        #[arg(long)]
        free_intercept: bool,
    },
    /// Cross coupling eta_jk from phase covariance against powers.
    EtaCross {
        #[command(flatten)]
        data: DataArg,
        /// Mode pair as `j,k`.
        #[arg(long, default_value = "0,1")]
        modes: String,
        #[arg(long)]
        free_intercept: bool,
    },
    /// Geometry scale factor from eta_00 against crystal position.
    Waist {
        #[command(flatten)]
        data: DataArg,
    },
    /// Linear law of eta_00 against crystal temperature.
    Temp {
        #[command(flatten)]
        data: DataArg,
    },
}

#[derive(Debug, Args)]
pub struct DataArg {
    /// Input CSV.
    #[arg(long, value_name = "PATH")]
    pub data: PathBuf,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Regime {
    /// Oscillator above threshold at the configured pump ratio.
    Opo,
    /// Empty cavity with vacuum inputs.
    Free,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Target {
    /// Analytic spectrum of the simulated system.
    Model,
    /// Analytic oscillator spectrum without phonon noise.
    EtaZero,
    /// Standard quantum level.
    Identity,
}

impl FitCommand {
    pub fn name(&self) -> &'static str {
        match self {
            FitCommand::EtaDiag { .. } => "eta_diag",
            FitCommand::EtaCross { .. } => "eta_cross",
            FitCommand::Waist { .. } => "waist",
            FitCommand::Temp { .. } => "temp",
        }
    }
}
