use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

/// Library-wide error type. Variants carry the indices needed to locate the
/// failure (station `m`, interval `n`, window sample `q`).
#[derive(Error, Debug)]
pub enum Error {
    #[error("degenerate geometry: target within {eps} m of {what} (m={m:?}, n={n:?})")]
    DegenerateGeometry {
        what: &'static str,
        eps: f64,
        m: Option<usize>,
        n: Option<usize>,
    },

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: String, got: String },

    #[error("target Doppler {f} Hz aliases at sampling rate {fs} Hz")]
    AliasedDoppler { f: f64, fs: f64 },

    #[error("CSI ratio denominator below {eps} at window sample q={q}")]
    NearZeroDenominator { q: usize, eps: f64 },

    #[error("window of {len} samples exceeds FFT size {n_fft}")]
    WindowTooLong { len: usize, n_fft: usize },

    #[error("CSI stream of {len} samples too short for a centered window of {needed}")]
    StreamTooShort { len: usize, needed: usize },

    #[error("innovation covariance ill-conditioned (cond={cond:.3e}) at interval {n}")]
    SingularInnovation { cond: f64, n: usize },

    #[error("target speed {speed} m/s below v_min {v_min} m/s; ray direction undefined")]
    SlowTarget { speed: f64, v_min: f64 },

    #[error("ray-fit normal matrix singular (cond={cond:.3e}); rays near-parallel")]
    SingularNormalMatrix { cond: f64 },

    #[error("too few usable instants for the ray fit: {usable} (need >= 2)")]
    TooFewRays { usable: usize },

    #[error("all {total} coarse candidates failed ({errors} geometry errors)")]
    AllCandidatesDegenerate { total: usize, errors: usize },

    #[error("coarse search failed: {0}")]
    CoarseFailed(Box<Error>),

    #[error("refinement failed at outer iteration {iter}: {source}")]
    RefineFailed {
        iter: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("interval {n} has only {available} available stations (need >= {needed})")]
    InsufficientStations {
        n: usize,
        available: usize,
        needed: usize,
    },

    #[error("trajectory shape extends {extent:.3} m past the arena half-width {arena:.3} m")]
    ShapeExceedsArena { extent: f64, arena: f64 },

    #[error("runs do not share a common true layout (run {run})")]
    LayoutMismatch { run: usize },

    #[error("invalid {what}: {why}")]
    InvalidInput { what: &'static str, why: String },

    #[error("parse error at line {line}: {why}")]
    Parse { line: usize, why: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn invalid(what: &'static str, why: impl Into<String>) -> Self {
        Error::InvalidInput {
            what,
            why: why.into(),
        }
    }
}
