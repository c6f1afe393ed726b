use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid parameter `{name}`: {reason}")]
    InvalidParameter { name: String, reason: String },

    #[error("ground-truth map is not a bijection: {0}")]
    NonBijective(String),

    #[error("residual has zero norm at {0}; cannot normalize")]
    DegenerateNorm(String),

    #[error("exact enumeration refused for N = {n} (limit {limit}); use the Monte-Carlo estimator")]
    EnumerationTooLarge { n: usize, limit: usize },

    #[error("non-finite value in `{what}` at step {step}")]
    NonFinite { what: String, step: usize },

    #[error("toy training diverged at step {step}")]
    ToyDiverged {
        step: usize,
        snapshot: Box<crate::toy::ValueMatrix>,
    },

    #[error("need both classes present: {0}")]
    SingleClass(String),

    #[error("empty input: {0}")]
    Empty(String),

    #[error("statistic undefined: {0}")]
    Undefined(String),

    #[error("no separation guaranteed: true and false residual norms coincide")]
    NoSeparation,

    #[error("malformed input: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn invalid(name: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::InvalidParameter {
            name: name.into(),
            reason: reason.into(),
        }
    }
}

pub(crate) fn check_probability(name: &str, value: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&value) {
        return Err(Error::invalid(name, format!("{value} is outside [0, 1]")));
    }
    Ok(())
}
