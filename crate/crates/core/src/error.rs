use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),

    #[error("missing or unparsable cell at row {row}, column `{column}`: {message}")]
    BadCell { row: usize, column: String, message: String },

    #[error("arm out of range at row {row}: got {value}, expected an integer in 1..={k}")]
    ArmOutOfRange { row: usize, value: String, k: usize },

    #[error("column `{0}` not found in header")]
    MissingColumn(String),

    #[error("dataset has zero rows")]
    EmptyDataset,

    #[error("invalid schema: {0}")]
    InvalidSchema(String),

    #[error("invalid allocation: {0}")]
    InvalidAllocation(String),

    #[error("invalid scheme: {0}")]
    InvalidScheme(String),

    #[error("scheme state corrupted: {0}")]
    SchemeInvariantViolated(String),

    #[error("arm {arm} has no patients")]
    EmptyArm { arm: usize },

    #[error("arm {arm} has {got} rows in the fit subset, need at least {need}")]
    TooFewRows { arm: usize, got: usize, need: usize },

    #[error("empty cell: arm {arm}, stratum `{stratum}`")]
    EmptyCell { arm: usize, stratum: String },

    #[error("empty arm {arm} in fold {fold}")]
    EmptyArmInFold { arm: usize, fold: usize },

    #[error("responses incompatible with {family} family: {message}")]
    BadResponse { family: String, message: String },

    #[error("IRLS did not converge within {iters} iterations (last gradient norm {grad_norm:.3e})")]
    IrlsNonConvergence { iters: usize, grad_norm: f64 },

    #[error("quasi-separation: coefficient norm {norm:.3e} diverged")]
    QuasiSeparation { norm: f64 },

    #[error("singular design matrix ({context}), ridge fallback also failed")]
    SingularDesign { context: String },

    #[error("rank deficient after pruning ({context}); dropped columns: [{dropped}]")]
    RankDeficient { context: String, dropped: String },

    #[error("covariate columns do not match the fitted design: {0}")]
    ColumnMismatch(String),

    #[error("variance flavor `{flavor}` unavailable: {reason}; valid alternatives: {alternatives}")]
    FlavorRefused { flavor: String, reason: String, alternatives: String },

    #[error("contrast error: {0}")]
    BadContrast(String),

    #[error("non-PSD at finite n: contrast variance quadratic form is {value:.3e}")]
    NonPsdVariance { value: f64 },

    #[error("missing joint-calibration record on the estimate")]
    MissingJcRecord,

    #[error("invalid fold plan: {0}")]
    InvalidFoldPlan(String),

    #[error("invalid scenario: {0}")]
    InvalidScenario(String),
}
