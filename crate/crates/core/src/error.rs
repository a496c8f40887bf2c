use thiserror::Error;

/// Failure modes shared by every solver and learner in the crate.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("matrix is not Schur stable (spectral radius {spectral_radius})")]
    UnstableMatrix { spectral_radius: f64 },

    #[error("ill-conditioned problem: {0}")]
    IllConditioned(String),

    #[error("numerical failure: {0}")]
    Numerical(String),

    /// `gamma^2 I - D^T P D` lost positive definiteness.
    #[error("risk parameter infeasible: {0}")]
    RiskInfeasible(String),

    #[error("gamma too small: {0}")]
    GammaTooSmall(String),

    #[error("no convergence after {iterations} iterations (last relative change {last_change:e})")]
    NoConvergence { iterations: usize, last_change: f64 },

    /// The gain leaves the admissible set: closed-loop H-infinity norm reached gamma.
    #[error("gain is not admissible: {0}")]
    NotAdmissible(String),

    #[error("not stabilizable: {0}")]
    NotStabilizable(String),

    #[error("insufficient excitation: {0}")]
    InsufficientExcitation(String),

    #[error("estimated operator is risk infeasible: {0}")]
    RiskInfeasibleEstimate(String),

    #[error("ill-conditioned estimate: {0}")]
    IllConditionedEstimate(String),

    #[error("exploration trajectory blew up at t = {step} (|x| = {norm:e})")]
    UnstableExploration { step: usize, norm: f64 },

    /// LMI problem has no strictly feasible point; `margin` is the best `t` found.
    #[error("LMI infeasible (best margin {margin:e})")]
    Infeasible { margin: f64 },

    #[error("{stage}: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<Error>,
    },

    #[error("config error: {0}")]
    Config(String),

    #[error("I/O error: {0}")]
    Io(String),
}

impl Error {
    pub fn at_stage(self, stage: &'static str) -> Self {
        Error::Stage {
            stage,
            source: Box::new(self),
        }
    }

    /// Innermost error, skipping stage labels.
    pub fn root(&self) -> &Error {
        match self {
            Error::Stage { source, .. } => source.root(),
            other => other,
        }
    }
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, Error>;
