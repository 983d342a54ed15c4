use thiserror::Error;

/// Errors raised by the estimator, the numerical oracles and the harness.
///
/// Each variant carries the kebab-case tag returned by [`Error::code`], which
/// is what appears in reports and CSV failure columns.
#[derive(Debug, Error)]
pub enum Error {
    #[error("unsupported-order: {family} wavelets of order {order} are not available")]
    UnsupportedOrder { family: &'static str, order: usize },

    #[error("cascade-init: {0}")]
    CascadeInit(String),

    #[error("resolution-cap: table of {entries} entries exceeds the cap of {cap}")]
    ResolutionCap { entries: u64, cap: u64 },

    #[error("quadrature-too-coarse: sub-level {sub_level} below the minimum of 2 (grid coarser than 2^-(j+2))")]
    QuadratureTooCoarse { sub_level: u32 },

    #[error("invalid-density-params: {0}")]
    InvalidDensityParams(String),

    #[error("empty-sample: at least one draw is required")]
    EmptySample,

    #[error("window-too-small: tail mass {tail_mass:e} outside [{lo}, {hi}] exceeds {tolerance:e}")]
    WindowTooSmall {
        lo: f64,
        hi: f64,
        tail_mass: f64,
        tolerance: f64,
    },

    #[error("delta-out-of-range: {0} is not in (0, 1/3)")]
    DeltaOutOfRange(f64),

    #[error("level-too-fine: level {level} plus table resolution {resolution} exceeds {max}")]
    LevelTooFine { level: u32, resolution: u32, max: u32 },

    #[error("mean-projection-required: {0}")]
    MeanProjectionRequired(String),

    #[error("need-two-points: martingale decomposition needs n >= 2, got {0}")]
    NeedTwoPoints(usize),

    #[error("degenerate-window: integral of f^2 over the window is zero")]
    DegenerateWindow,

    #[error("eigen-failure: {0}")]
    EigenFailure(String),

    #[error("trajectory-too-short: n_max = {0} < 100")]
    TrajectoryTooShort(usize),

    #[error("invalid-config: {0}")]
    Config(String),

    #[error("table-format: {0}")]
    TableFormat(String),

    #[error("io: {0}")]
    Io(#[from] std::io::Error),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),

    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
}

impl Error {
    /// Stable short tag for reports.
    pub fn code(&self) -> &'static str {
        match self {
            Error::UnsupportedOrder { .. } => "unsupported-order",
            Error::CascadeInit(_) => "cascade-init",
            Error::ResolutionCap { .. } => "resolution-cap",
            Error::QuadratureTooCoarse { .. } => "quadrature-too-coarse",
            Error::InvalidDensityParams(_) => "invalid-density-params",
            Error::EmptySample => "empty-sample",
            Error::WindowTooSmall { .. } => "window-too-small",
            Error::DeltaOutOfRange(_) => "delta-out-of-range",
            Error::LevelTooFine { .. } => "level-too-fine",
            Error::MeanProjectionRequired(_) => "mean-projection-required",
            Error::NeedTwoPoints(_) => "need-two-points",
            Error::DegenerateWindow => "degenerate-window",
            Error::EigenFailure(_) => "eigen-failure",
            Error::TrajectoryTooShort(_) => "trajectory-too-short",
            Error::Config(_) => "invalid-config",
            Error::TableFormat(_) => "table-format",
            Error::Io(_) => "io",
            Error::Json(_) => "json",
            Error::Csv(_) => "csv",
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
