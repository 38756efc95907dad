use thiserror::Error;

/// Errors raised by the simulator, planner and evaluation harness.
#[derive(Error, Debug, Clone, PartialEq)]
pub enum Error {
    #[error("precondition violated: {0}")]
    Precondition(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("degenerate point configuration: {0}")]
    Degenerate(String),

    #[error("fiducial calibration failed: {0}")]
    Calibration(String),

    #[error("no feasible target after {attempts} rejected draws")]
    InfeasibleRegion { attempts: usize },

    #[error("no plan found (best clearance {best_clearance:.3} mm, {samples} samples used)")]
    NoPlanFound { best_clearance: f64, samples: usize },

    #[error("segment incomplete: {remaining:.3} mm left when the window closed")]
    SegmentIncomplete { remaining: f64 },

    #[error("safety stop: true clearance {clearance:.3} mm at t = {t:.2} s")]
    SafetyStop { clearance: f64, t: f64 },

    #[error("alignment failed after {attempts} aiming attempts")]
    AlignmentFailed { attempts: usize },

    #[error("timed out after {waited:.1} s waiting for a safe insertion window")]
    GateTimeout { waited: f64 },

    #[error("parse error: {0}")]
    Parse(String),

    #[error("i/o error: {0}")]
    Io(String),
}

impl Error {
    /// Short stable identifier used in one-line diagnostics.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Precondition(_) => "Precondition",
            Error::Config(_) => "Config",
            Error::Degenerate(_) => "Degenerate",
            Error::Calibration(_) => "Calibration",
            Error::InfeasibleRegion { .. } => "InfeasibleRegion",
            Error::NoPlanFound { .. } => "NoPlanFound",
            Error::SegmentIncomplete { .. } => "SegmentIncomplete",
            Error::SafetyStop { .. } => "SafetyStop",
            Error::AlignmentFailed { .. } => "AlignmentFailed",
            Error::GateTimeout { .. } => "GateTimeout",
            Error::Parse(_) => "Parse",
            Error::Io(_) => "Io",
        }
    }
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Parse(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, Error>;
