use thiserror::Error;

/// Crate-wide error type.
///
/// Numeric conditions that other codebases silently clamp (a realized token
/// with probability zero, a divergence that is +infinity) are surfaced as
/// typed errors here so the exact identities checked by the oracle stay exact.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid {what}: {why}")]
    Invalid { what: &'static str, why: String },

    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },

    #[error("config error for key `{key}`{}: {msg}", line.map(|l| format!(" (line {l})")).unwrap_or_default())]
    Config {
        key: String,
        line: Option<usize>,
        msg: String,
    },

    #[error("zero-probability token {token} at step {step}: log-probability is -infinity")]
    ZeroProbToken { step: usize, token: usize },

    #[error("divergence is +infinity: p[{token}] > 0 while q[{token}] = 0{}", step.map(|s| format!(" (step {s})")).unwrap_or_default())]
    SupportViolation { token: usize, step: Option<usize> },

    #[error("enumeration budget exceeded: {requested} sequences > {budget}")]
    BudgetExceeded { requested: f64, budget: f64 },

    #[error("non-finite value in {what}")]
    NonFinite { what: String },

    #[error("training aborted at step {step}: {source}; sample x={prompt:?} y={response:?}")]
    TrainAbort {
        step: usize,
        prompt: Vec<usize>,
        response: Vec<usize>,
        #[source]
        source: Box<Error>,
    },

    #[error("dimension mismatch in {what}: expected {expected}, got {got}")]
    DimensionMismatch {
        what: &'static str,
        expected: usize,
        got: usize,
    },

    #[error("empty input: {0}")]
    EmptyInput(&'static str),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub fn invalid(what: &'static str, why: impl Into<String>) -> Self {
        Error::Invalid {
            what,
            why: why.into(),
        }
    }

    /// Attach a step index to a support violation raised at token level.
    pub fn at_step(self, step: usize) -> Self {
        match self {
            Error::SupportViolation { token, .. } => Error::SupportViolation {
                token,
                step: Some(step),
            },
            other => other,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
