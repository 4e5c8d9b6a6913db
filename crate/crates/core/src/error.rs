//! Error type shared across the crate.

use std::fmt;

/// Everything that can go wrong while configuring or running an estimator.
#[derive(Debug)]
pub enum Error {
    /// Configuration or input rejected before any computation ran. The
    /// message enumerates every failed check, not just the first.
    InvalidInput(String),
    /// A tilt exponent left the range `exp` can represent; the caller must
    /// reduce the tilt strength or shorten the resampling interval.
    WeightOverflow { epoch: usize, max_exponent: f64 },
    /// The ensemble died: no particle drew a copy at a resampling step.
    Extinction { epoch: usize },
    /// An ancestry walk hit a parent index outside the recorded ensemble.
    BrokenLineage { epoch: usize, child: usize },
    /// The likelihood optimizer failed its stationarity check on every
    /// start; carries the best point found and its gradient norm.
    NonConvergence {
        params: [f64; 3],
        grad_norm: f64,
        message: String,
    },
    /// No lag within the usable range brought the autocorrelation below
    /// tolerance; carries the smallest magnitude achieved.
    NoDecorrelation { min_autocorr: f64 },
    /// Ranked probability masses grossly exceed a total of one, which no
    /// amount of sampling noise explains.
    InvalidMasses { total: f64 },
    /// Bundles being compared were produced at different computational cost.
    CostMismatch { reference: f64, found: f64 },
    /// Bundles being compared measure different observables.
    ObservableMismatch { left: String, right: String },
    /// Every experiment of a batch failed; carries the first failure text.
    AllExperimentsFailed { failures: usize, first: String },
    /// Serialization or deserialization of a result or config file failed.
    Persist(String),
    Io(std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::InvalidInput(msg) => write!(f, "invalid input: {msg}"),
            Error::WeightOverflow {
                epoch,
                max_exponent,
            } => write!(
                f,
                "weight overflow at epoch {epoch}: max exponent {max_exponent:.1} \
                 exceeds the representable range; reduce the tilt strength"
            ),
            Error::Extinction { epoch } => {
                write!(f, "ensemble extinct after resampling at epoch {epoch}")
            }
            Error::BrokenLineage { epoch, child } => write!(
                f,
                "ancestry record at epoch {epoch} has no parent for child {child}"
            ),
            Error::NonConvergence {
                params,
                grad_norm,
                message,
            } => write!(
                f,
                "fit did not converge: {message} (best point mu={} sigma={} zeta={}, \
                 gradient norm {grad_norm:.3e})",
                params[0], params[1], params[2]
            ),
            Error::NoDecorrelation { min_autocorr } => write!(
                f,
                "series never decorrelates below tolerance within half its length \
                 (smallest |autocorrelation| reached: {min_autocorr:.4})"
            ),
            Error::InvalidMasses { total } => write!(
                f,
                "ranked probability masses sum to {total:.6}, far above one; \
                 the estimates are not probabilities"
            ),
            Error::CostMismatch { reference, found } => write!(
                f,
                "cost mismatch: bundle spent {found:.3e} cost units against a \
                 reference of {reference:.3e} (more than 5% apart)"
            ),
            Error::ObservableMismatch { left, right } => write!(
                f,
                "bundles measure different observables: {left} vs {right}"
            ),
            Error::AllExperimentsFailed { failures, first } => write!(
                f,
                "all {failures} experiments failed; first failure: {first}"
            ),
            Error::Persist(msg) => write!(f, "persistence error: {msg}"),
            Error::Io(err) => write!(f, "io error: {err}"),
        }
    }
}

impl std::error::Error for Error {
    fn source(&self) -> Option<&(dyn std::error::Error + 'static)> {
        match self {
            Error::Io(err) => Some(err),
            _ => None,
        }
    }
}

impl From<std::io::Error> for Error {
    fn from(err: std::io::Error) -> Self {
        Error::Io(err)
    }
}

impl From<csv::Error> for Error {
    fn from(err: csv::Error) -> Self {
        Error::Persist(err.to_string())
    }
}

impl From<serde_json::Error> for Error {
    fn from(err: serde_json::Error) -> Self {
        Error::Persist(err.to_string())
    }
}

impl From<toml::de::Error> for Error {
    fn from(err: toml::de::Error) -> Self {
        Error::Persist(err.to_string())
    }
}

impl From<toml::ser::Error> for Error {
    fn from(err: toml::ser::Error) -> Self {
        Error::Persist(err.to_string())
    }
}
