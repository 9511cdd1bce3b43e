use thiserror::Error;

use crate::model::Violation;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid configuration: {}", join_violations(.0))]
    InvalidConfig(Vec<Violation>),

    #[error("config line {line}: {message}")]
    ConfigSyntax { line: usize, message: String },

    #[error("missing config key `{0}`")]
    MissingKey(String),

    #[error("unknown config key `{0}`")]
    UnknownKey(String),

    #[error("config key `{key}`: cannot parse `{value}` as {expected}")]
    BadValue {
        key: String,
        value: String,
        expected: &'static str,
    },

    #[error("invalid parameter `{name}`: {reason}")]
    InvalidParameter { name: &'static str, reason: String },

    #[error("pump ratio {0} is below threshold (must be >= 1)")]
    BelowThreshold(f64),

    #[error(
        "unbalanced signal/idler losses (gamma {gamma1} vs {gamma2}, mu {mu1} vs {mu2}); \
         the above-threshold drift model requires gamma1 = gamma2 and mu1 = mu2"
    )]
    UnbalancedLosses {
        gamma1: f64,
        gamma2: f64,
        mu1: f64,
        mu2: f64,
    },

    #[error("{what} is not positive semidefinite (smallest eigenvalue {min_eigenvalue:e})")]
    NotPositiveSemidefinite {
        what: &'static str,
        min_eigenvalue: f64,
    },

    #[error("{what} is not symmetric (max asymmetry {asymmetry:e})")]
    NotSymmetric { what: &'static str, asymmetry: f64 },

    #[error("[i*omega - M] is singular or ill-conditioned at omega = {omega} (condition number {condition:e})")]
    SingularTransfer { omega: f64, condition: f64 },

    #[error("trajectory {trajectory} diverged at step {step} (|X| = {norm:e})")]
    Divergence {
        trajectory: usize,
        step: usize,
        norm: f64,
    },

    #[error("insufficient segments for spectral estimate: {found} < {required}")]
    InsufficientSegments { found: usize, required: usize },

    #[error("insufficient data: need at least {required} points, got {found}")]
    InsufficientData { required: usize, found: usize },

    #[error("records mix power references ({first} and {second})")]
    MixedPowerReference { first: String, second: String },

    #[error("no sign change in bracket [{lo}, {hi}] (f(lo) = {f_lo:e}, f(hi) = {f_hi:e})")]
    NoSignChange {
        lo: f64,
        hi: f64,
        f_lo: f64,
        f_hi: f64,
    },

    #[error("root finder did not converge after {0} iterations")]
    NoConvergence(usize),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    /// True for failures of a numerical procedure, as opposed to bad input.
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            Error::SingularTransfer { .. }
                | Error::Divergence { .. }
                | Error::InsufficientSegments { .. }
                | Error::NoSignChange { .. }
                | Error::NoConvergence(_)
        )
    }
}

fn join_violations(v: &[Violation]) -> String {
    v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join("; ")
}
