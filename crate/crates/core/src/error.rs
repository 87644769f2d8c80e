use thiserror::Error;

/// Errors raised by the numerical toolkit.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid parameter `{name}`: {reason}")]
    InvalidParameter { name: &'static str, reason: String },

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("grid with {samples} samples cannot resolve degree {degree} (need at least {required})")]
    GridTooCoarse {
        samples: usize,
        degree: usize,
        required: usize,
    },

    #[error("eigenvalue {value:.3e} lies within {margin:.1e} of the cluster boundary {boundary:.3e}")]
    AmbiguousSpectrum {
        value: f64,
        boundary: f64,
        margin: f64,
    },

    #[error("rank decision ambiguous: singular value ratio {ratio:.3e} falls in [{lower:.1e}, {upper:.1e}]; change the rank tolerance")]
    AmbiguousRank { ratio: f64, lower: f64, upper: f64 },

    #[error("hypothesis violated: {0}")]
    Hypothesis(String),

    #[error("map is not a diffeomorphism: det = {det:.3e} at t = {t:.4}, q = {q:?}")]
    NotDiffeomorphism { t: f64, q: Vec<f64>, det: f64 },

    #[error("relative index unstable across truncations {levels:?}; increase K")]
    IndexUnstable { levels: Vec<(usize, i64)> },

    #[error("step size collapsed below {min_step:.1e} at t = {t:.6} (action {action:.12e}, gradient norm {gradient_norm:.3e})")]
    StepCollapse {
        t: f64,
        min_step: f64,
        action: f64,
        gradient_norm: f64,
    },

    #[error("action is not a Lyapunov function for the perturbed field: dA[F] = {value:.3e} at sample {sample}")]
    LyapunovViolation { sample: usize, value: f64 },

    #[error("two connections at distance {distance:.3e}, inside the ambiguity band above {tolerance:.1e}; refine the dedup tolerance")]
    DedupAmbiguous { distance: f64, tolerance: f64 },

    #[error("missing connection count for index-gap-1 pair ({0}, {1})")]
    MissingCount(usize, usize),

    #[error("boundary squares to nonzero in degree {degree}: entry (generator {upper} -> generator {lower})")]
    BoundarySquare {
        degree: i64,
        upper: usize,
        lower: usize,
    },

    #[error("chain-map identity fails in degree {degree} at entry ({row}, {col})")]
    ChainMap { degree: i64, row: usize, col: usize },

    #[error("singular system: {0}")]
    Singular(String),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn invalid(name: &'static str, reason: impl Into<String>) -> Error {
    Error::InvalidParameter {
        name,
        reason: reason.into(),
    }
}
