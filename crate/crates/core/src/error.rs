use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {context}: expected {expected}, got {got}")]
    Dimension {
        context: &'static str,
        expected: usize,
        got: usize,
    },

    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("factorization of {0} failed")]
    Factorization(&'static str),

    #[error("alignment undefined: {0}")]
    UndefinedAlignment(&'static str),

    #[error("dynamics diverged at step {step}: mean |w|^2 = {mean_w_sq:e} (limit {limit:e})")]
    Diverged { step: u64, mean_w_sq: f64, limit: f64 },

    #[error("config error: {0}")]
    Config(String),

    #[error("malformed {what}: {detail}")]
    Malformed { what: &'static str, detail: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn dim(context: &'static str, expected: usize, got: usize) -> Self {
        Error::Dimension {
            context,
            expected,
            got,
        }
    }

    /// Process exit code used by the command line front end.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::InvalidParameter(_) => 2,
            Error::Diverged { .. } | Error::NonFinite(_) => 3,
            Error::Io(_) | Error::Csv(_) | Error::Malformed { .. } => 4,
            _ => 1,
        }
    }
}

pub(crate) fn check_dim(context: &'static str, expected: usize, got: usize) -> Result<()> {
    if expected == got {
        Ok(())
    } else {
        Err(Error::dim(context, expected, got))
    }
}
