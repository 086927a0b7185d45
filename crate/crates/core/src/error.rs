use thiserror::Error;

/// Errors produced by the certification pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: expected {expected}, got {got} ({context})")]
    DimensionMismatch {
        expected: usize,
        got: usize,
        context: &'static str,
    },

    #[error("unknown system name: {0}")]
    UnknownSystem(String),

    #[error("invalid parameter: {0}")]
    InvalidParams(String),

    #[error("numerical singularity: {0}")]
    Singularity(String),

    #[error("impact map singular at alpha = {alpha}")]
    ImpactSingularity { alpha: f64 },

    #[error("integration failed at t = {t}: {reason}")]
    Integration { t: f64, reason: String },

    #[error("limit cycle search did not converge: last return-map residual {residual:e}")]
    NoConvergence { residual: f64 },

    #[error("transversality violated at phase {tau}: z'f = {value:e}")]
    Transversality { tau: f64, value: f64 },

    #[error("state outside the well-posed tube: {0}")]
    OutOfTube(String),

    #[error("periodic linear system not stable: monodromy spectral radius {rho}")]
    Unstable { rho: f64 },

    #[error("periodic pair not stabilizable: backward Riccati sweep diverged ({0})")]
    NotStabilizable(String),

    #[error("SDP solver failed: {0}")]
    SdpFailure(String),

    #[error("certificate seed infeasible at sample {sample}: {reason}")]
    SeedInfeasible { sample: usize, reason: String },

    #[error("alternation aborted at sample {sample}: {reason}")]
    AlternationAborted { sample: usize, reason: String },

    #[error("missing prerequisite artifact {artifact}; run `{subcommand}` first")]
    MissingArtifact {
        artifact: String,
        subcommand: String,
    },

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("serialization error: {0}")]
    Serde(#[from] serde_json::Error),

    #[error("{0}")]
    Other(String),
}
