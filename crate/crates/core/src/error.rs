use thiserror::Error;

/// Errors raised across the toolkit.
///
/// Variants map onto process exit codes in the CLI, see [`Error::exit_code`].
#[derive(Debug, Error)]
pub enum Error {
    /// An argument fell outside the mathematical domain of a formula.
    #[error("domain error: {0}")]
    Domain(String),

    /// Membrane resistivity denominator went non-positive (dry-out regime).
    #[error("membrane resistivity singular: lambda - 0.643 - 3 i = {0}")]
    MembraneSingular(f64),

    /// Current density reached the limiting current density.
    #[error("current density {density} A/cm^2 at or above limit {limit} A/cm^2")]
    Saturation { density: f64, limit: f64 },

    /// Kernel matrix could not be factorized even after jitter retries.
    #[error("kernel matrix is ill-conditioned; last jitter tried {jitter:e}")]
    IllConditioned { jitter: f64 },

    /// Posterior variance came out materially negative.
    #[error("numerical failure: {0}")]
    Numerical(String),

    /// Every hyperparameter restart failed.
    #[error("hyperparameter optimization failed: {reason}")]
    Optimization {
        reason: String,
        best: Option<Box<crate::gp::KernelParams>>,
    },

    /// Bad shapes, bounds or other caller mistakes.
    #[error("invalid input: {0}")]
    Input(String),

    /// Configuration file problems.
    #[error("config error: {0}")]
    Config(String),

    /// A plant fault surfaced during closed-loop simulation.
    #[error("plant fault at t = {time} s: {source}")]
    PlantFault {
        time: f64,
        #[source]
        source: Box<Error>,
    },

    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),

    #[error("CSV error: {0}")]
    Csv(#[from] csv::Error),

    #[error("parse error: {0}")]
    Parse(String),
}

impl Error {
    /// True for faults that originate in the fuel cell model itself.
    pub fn is_plant_fault(&self) -> bool {
        matches!(
            self,
            Error::Domain(_)
                | Error::MembraneSingular(_)
                | Error::Saturation { .. }
                | Error::PlantFault { .. }
        )
    }

    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::Input(_) => 2,
            Error::Io(_) | Error::Csv(_) | Error::Parse(_) => 3,
            Error::IllConditioned { .. } | Error::Numerical(_) | Error::Optimization { .. } => 4,
            Error::Domain(_)
            | Error::MembraneSingular(_)
            | Error::Saturation { .. }
            | Error::PlantFault { .. } => 5,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
