use thiserror::Error;

/// Crate-wide error type.
#[derive(Debug, Error)]
pub enum Error {
    #[error("unknown symbol `{0}`")]
    UnknownSymbol(String),
    #[error("frequency vector is zero")]
    ZeroFrequency,
    #[error("frequency {0:?} lies in the singular set of symbol `{1}`")]
    SingularFrequency(Vec<f64>, String),
    #[error("no regular points found at the sampled resolution")]
    NoRegularPoints,
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("spectral support touches the singular set (energy fraction {0:.3e})")]
    SingularSupport(f64),
    #[error("mode budget exceeded: {0}")]
    GridOverflow(String),
    #[error("truncation search exhausted at order {0} ({1})")]
    TruncationSearchExhausted(usize, String),
    #[error("degenerate wave direction: leading frequency component is zero")]
    DegenerateDirection,
    #[error("wave property `{property}` violated: measured {measured:.6e}, allowed {allowed:.6e}")]
    PropertyFailure {
        property: &'static str,
        measured: f64,
        allowed: f64,
    },
    #[error("screen transversality failure: {0}")]
    TransversalityFailure(String),
    #[error("symbol range does not span the state space: {0}")]
    SpanFailure(String),
    #[error("|theta| too close to 1 for the two-point split (theta = {0})")]
    DegenerateTheta(f64),
    #[error("point lies outside the certified projection ball (|x - q0| = {0:.3e} > {1:.3e})")]
    OutsideBall(f64, f64),
    #[error("no screen intersection found; patch sampled too coarsely")]
    NoIntersection,
    #[error("convex weight out of range: {0}")]
    WeightOutOfRange(f64),
    #[error("eta = {0} rejected: (1-eta)^3 = {1:.6} <= 1/2")]
    EtaTooLarge(f64, f64),
    #[error("cascade degenerate at step {step}: dwell fraction {measured:.4} below {required:.4}")]
    CascadeDegenerate {
        step: usize,
        measured: f64,
        required: f64,
    },
    #[error("ball cover failed: captured {0:.4} of the distance mass, need >= 1/2")]
    CoverFailure(f64),
    #[error("grid mismatch: {0}")]
    GridMismatch(String),
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("usage error: {0}")]
    Usage(String),
    #[error("malformed file: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
