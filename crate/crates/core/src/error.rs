use thiserror::Error;

/// Errors raised by the synthesis, simulation and certification pipeline.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("grid mismatch: {0}")]
    GridMismatch(String),

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("no admissible N0 within scan depth {scan_depth} (alpha = {alpha:?})")]
    NoAdmissibleN0 { scan_depth: usize, alpha: Option<f64> },

    #[error("tail assumption violated: {0}")]
    TailAssumption(String),

    #[error("uncontrollable pair: input coefficient of mode {mode} is zero")]
    Uncontrollable { mode: usize },

    #[error("pole placement supports single-input plants only (m = {m}); provide the gain K manually")]
    MultiInput { m: usize },

    #[error("pole placement failed: {0}")]
    PlacementFailed(String),

    #[error("matrix is not Hurwitz (spectral abscissa {abscissa})")]
    NotHurwitz { abscissa: f64 },

    #[error("small-gain condition violated: {0}")]
    SmallGain(String),

    #[error("implicit control law did not converge at t = {t} after {iters} iterations (step {step:e})")]
    ControllerDiverged { t: f64, iters: usize, step: f64 },

    #[error("controller contraction check failed: factor {factor} >= 1 (reduce controller dt)")]
    Contraction { factor: f64 },

    #[error("insufficient control history: requested t = {requested}, available [{first}, {last}]")]
    InsufficientHistory { requested: f64, first: f64, last: f64 },

    #[error("simulation produced a non-finite state at step {step} (t = {t})")]
    Diverged { step: usize, t: f64 },

    #[error("delay amplitude {amplitude} exceeds the certified uncertainty {delta}")]
    Uncertified { amplitude: f64, delta: f64 },

    #[error("ensemble is missing the {0} channel")]
    MissingChannel(&'static str),

    #[error("fitted constants are missing; run the constant fit first")]
    MissingFit,
}

pub type Result<T> = std::result::Result<T, Error>;
