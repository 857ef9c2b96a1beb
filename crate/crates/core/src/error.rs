use thiserror::Error;

/// Errors produced by kernel construction, evaluation and sampling.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid lattice specification: {0}")]
    InvalidSpec(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("momentum component {value} lies outside the Brillouin zone [-{bound}, {bound}]")]
    OutsideBrillouinZone { value: f64, bound: f64 },

    #[error("cube of side {side} at spacing {spacing} has no interior lattice point")]
    EmptyInterior { side: f64, spacing: f64 },

    #[error("Dirichlet solve failed: {0}")]
    SolverFailure(String),

    #[error("random walk did not exit within {cap} jumps")]
    StepCapExceeded { cap: u64 },

    #[error("bump profile has vanishing lattice sum at spacing {spacing}")]
    DegenerateBump { spacing: f64 },

    #[error("massless resolvent evaluated at zero momentum")]
    PoleAtZero,

    #[error("torus of {side} sites cannot hold a kernel of range {required_sites} sites")]
    TorusTooSmall { side: usize, required_sites: usize },

    #[error("torus spectrum has eigenvalue {value:e} below -{tolerance:e} times its maximum")]
    NegativeSpectrumBeyondTolerance { value: f64, tolerance: f64 },

    #[error("quadrature tolerance {tol:e} needs more than {budget} nodes")]
    ToleranceUnreachable { tol: f64, budget: usize },

    #[error("field does not vanish on the boundary of the unit cube")]
    NonZeroBoundary,

    #[error("kernel with {sites} weights exceeds the budget of {budget}")]
    ProblemTooLarge { sites: usize, budget: usize },

    #[error("kernel cache: {0}")]
    Cache(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Stable identifier used in machine-readable reports.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::InvalidSpec(_) => "InvalidSpec",
            Error::InvalidArgument(_) => "InvalidArgument",
            Error::OutsideBrillouinZone { .. } => "OutsideBrillouinZone",
            Error::EmptyInterior { .. } => "EmptyInterior",
            Error::SolverFailure(_) => "SolverFailure",
            Error::StepCapExceeded { .. } => "StepCapExceeded",
            Error::DegenerateBump { .. } => "DegenerateBump",
            Error::PoleAtZero => "PoleAtZero",
            Error::TorusTooSmall { .. } => "TorusTooSmall",
            Error::NegativeSpectrumBeyondTolerance { .. } => "NegativeSpectrumBeyondTolerance",
            Error::ToleranceUnreachable { .. } => "ToleranceUnreachable",
            Error::NonZeroBoundary => "NonZeroBoundary",
            Error::ProblemTooLarge { .. } => "ProblemTooLarge",
            Error::Cache(_) => "Cache",
            Error::Io(_) => "Io",
            Error::Json(_) => "Json",
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
