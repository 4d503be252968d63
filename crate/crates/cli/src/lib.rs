//! Experiment harness: configuration, data simulation, the four studies and result files.

pub mod config;
pub mod data;
pub mod experiments;
pub mod output;

use thiserror::Error;

pub use config::{Experiment, ExperimentConfig};
pub use output::{ResultRow, RunOutput};

#[derive(Debug, Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),
    #[error("numerical failure: {0}")]
    Numerical(String),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            Self::Config(_) => 2,
            Self::Numerical(_) => 3,
            Self::Io(_) => 1,
        }
    }
}

macro_rules! numerical {
    ($($t:ty),*) => {$(
        impl From<$t> for CliError {
            fn from(e: $t) -> Self {
                Self::Numerical(e.to_string())
            }
        }
    )*};
}

numerical!(
    weakform_core::fem::FemError,
    weakform_core::linalg::LinalgError,
    weakform_core::relax::RelaxError,
    weakform_core::hmc::HmcError,
    weakform_core::surrogate::SurrogateError,
    weakform_core::mesh::MeshError
);

impl From<weakform_core::vi::ViError> for CliError {
    fn from(e: weakform_core::vi::ViError) -> Self {
        match e {
            weakform_core::vi::ViError::Config(m) => Self::Config(m),
            other => Self::Numerical(other.to_string()),
        }
    }
}

/// Runs one experiment under a validated configuration.
pub fn run(experiment: Experiment, config: &ExperimentConfig) -> Result<RunOutput, CliError> {
    config.validate(experiment)?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(config.threads)
        .build()
        .map_err(|e| CliError::Config(format!("thread pool: {e}")))?;
    pool.install(|| match experiment {
        Experiment::TransportBip => experiments::run_transport_bip(config),
        Experiment::TaperStudy => experiments::run_taper_study(config),
        Experiment::CoverageCurve => experiments::run_coverage_curve(config),
        Experiment::PointwiseCompare => experiments::run_pointwise_compare(config),
    })
}
