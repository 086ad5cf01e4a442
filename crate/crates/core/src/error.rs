use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("dimension mismatch for {what}: expected {expected}, got {got}")]
    Dimension {
        what: &'static str,
        expected: usize,
        got: usize,
    },

    #[error("controller design failed: {0}")]
    Design(String),

    /// A conformal quantile came out as the `+inf` atom.
    #[error(
        "insufficient calibration at step {step}: {samples} samples cannot support miscoverage {alpha} (need K >= {required})"
    )]
    InsufficientCalibration {
        step: usize,
        samples: usize,
        alpha: f64,
        required: usize,
    },

    #[error("obstacle normal undefined: point coincides with obstacle center")]
    DegenerateNormal,

    #[error("planning problem infeasible: {0}")]
    Infeasible(String),

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("artifact format error: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    /// Process exit code: 2 insufficient calibration, 3 infeasible, 4 numerical, 1 otherwise.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::InsufficientCalibration { .. } => 2,
            Error::Infeasible(_) => 3,
            Error::Numerical(_) | Error::DegenerateNormal | Error::Design(_) => 4,
            _ => 1,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn check_dim(what: &'static str, expected: usize, got: usize) -> Result<()> {
    if expected == got {
        Ok(())
    } else {
        Err(Error::Dimension {
            what,
            expected,
            got,
        })
    }
}
