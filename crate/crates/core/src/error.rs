use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    // linear algebra of involutions / reversible matrices
    #[error("matrix is not an involution: max |R·R - I| = {0:e}")]
    NotInvolutive(f64),
    #[error("involution has {plus} eigenvalues +1 and {minus} eigenvalues -1; expected p each")]
    WrongSignature { plus: usize, minus: usize },
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("not reversible: {0}")]
    NotReversible(String),
    #[error("spectrum not simple: eigenvalue gap {gap:e} below tolerance {tol:e}")]
    MultipleEigenvalues { gap: f64, tol: f64 },
    #[error("matrix is singular: eigenvalue of modulus {0:e}")]
    SingularMatrix(f64),
    #[error("spectrum classification failed: {0}")]
    ClassificationFailed(String),
    #[error("submersivity failed: rank {rank} < required {required}")]
    SubmersivityFailed { rank: usize, required: usize },

    // Diophantine machinery
    #[error("Fourier cutoff must be at least 1")]
    CutoffTooSmall,
    #[error("rho^Q needs a non-empty frequency map (n = 0)")]
    EmptyTarget,
    #[error("Xi^Q needs a non-zero integer vector l")]
    ZeroL,
    #[error("sampler produced no points")]
    SamplerEmpty,

    // model ingestion
    #[error("schema error: {0}")]
    Schema(String),
    #[error("order condition violated by {field}: {detail}")]
    OrderViolation { field: String, detail: String },
    #[error("forcing frequency is not Diophantine: worst k = {worst_k:?}, ratio {ratio:e}")]
    OmegaNotDiophantine { worst_k: Vec<i64>, ratio: f64 },
    #[error("M(mu) is singular at mu = {0:?}")]
    SingularM(Vec<f64>),

    // solver
    #[error("small divisor {divisor:e} at mode {mode:?} below guard {guard:e}")]
    SmallDivisorBreach { mode: Vec<i64>, divisor: f64, guard: f64 },
    #[error("right-hand side has non-zero mean {0:e}")]
    NonzeroMean(f64),
    #[error("Newton iteration diverged; residual history {history:?}")]
    NewtonDiverged { history: Vec<f64> },
    #[error("perturbation size {size:e} exceeds gate {gate:e}")]
    GateExceeded { size: f64, gate: f64 },
    #[error("integrator failure: {0}")]
    IntegratorFailure(String),
    #[error("fixed-point inversion failed to contract: {0}")]
    ContractionFailed(String),
    #[error("insufficient grid: {0}")]
    InsufficientGrid(String),
    #[error("precondition failed: {0}")]
    Precondition(String),
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    /// Process exit code used by the command-line driver.
    pub fn exit_code(&self) -> i32 {
        use Error::*;
        match self {
            OmegaNotDiophantine { .. } | Precondition(_) | SubmersivityFailed { .. } => 4,
            SmallDivisorBreach { .. }
            | NewtonDiverged { .. }
            | GateExceeded { .. }
            | IntegratorFailure(_)
            | ContractionFailed(_)
            | NonzeroMean(_) => 3,
            _ => 2,
        }
    }
}
