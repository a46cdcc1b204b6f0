use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("state norm exceeded the divergence bound {bound:e} at step {step}")]
    Diverged { step: usize, bound: f64 },

    #[error("normal equations are numerically singular; use a positive Tikhonov weight")]
    IllConditioned,

    #[error("reservoir matrix has zero spectral radius after {attempts} attempts")]
    DegenerateReservoir { attempts: usize },

    #[error("objective is not finite at the initial point")]
    NonFiniteObjective,

    #[error("malformed input: {0}")]
    Parse(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

macro_rules! ensure {
    ($cond:expr, $variant:ident, $($fmt:tt)+) => {
        if !$cond {
            return Err($crate::error::Error::$variant(format!($($fmt)+)));
        }
    };
}
pub(crate) use ensure;
