use thiserror::Error;

use crate::manifold::PoseSE3;

pub type Result<T> = std::result::Result<T, Error>;

/// Diagnostics carried by a registration that could not be certified.
#[derive(Debug, Clone)]
pub struct RegistrationFailure {
    /// Pose rounded from the leading eigenvector of the SDP solution.
    pub candidate: PoseSE3,
    /// Rounded objective minus the SDP lower bound.
    pub optimality_gap: f64,
    /// Second-largest over largest eigenvalue of the SDP matrix.
    pub rank1_ratio: f64,
}

#[derive(Error, Debug)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("log map undefined: rotation angle {angle} is within {margin} of pi")]
    LogSingularity { angle: f64, margin: f64 },

    #[error("covariance is singular after regularization")]
    SingularCovariance,

    #[error("matrix is not positive definite: {0}")]
    NotPositiveDefinite(String),

    #[error("weight matrix is not symmetric (asymmetry {0:e})")]
    AsymmetricWeight(f64),

    #[error("SDP solver hit the iteration cap ({iterations}) with relative gap {gap:e}")]
    SdpMaxIterations {
        iterations: usize,
        gap: f64,
        best: Box<crate::registration::SdpSolution>,
    },

    #[error("SDP constraint system is infeasible: {0}")]
    SdpInfeasible(String),

    #[error(
        "relaxation is not tight (gap {:e}, rank-1 ratio {:e})",
        .0.optimality_gap,
        .0.rank1_ratio
    )]
    NotTight(Box<RegistrationFailure>),

    #[error("reduced KKT system is rank deficient ({0})")]
    RankDeficientKkt(String),

    #[error("no correspondences survived the distance threshold")]
    NoCorrespondences,

    #[error("need more than {needed} points, got {got}")]
    InsufficientPoints { needed: usize, got: usize },

    #[error("degenerate geometry: {0}")]
    DegenerateGeometry(String),

    #[error("parse error at byte {offset}: {message}")]
    Parse { offset: usize, message: String },

    #[error("odometry failed on scan pair {failed_pair}: {cause}")]
    Odometry {
        failed_pair: usize,
        /// Poses estimated before the failure.
        partial: Box<crate::matching::Trajectory>,
        cause: Box<Error>,
    },

    #[error("config error: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// True for failures of the numerical machinery (as opposed to bad input
    /// data), which the CLI reports with a dedicated exit code.
    pub fn is_numerical(&self) -> bool {
        if let Error::Odometry { cause, .. } = self {
            return cause.is_numerical();
        }
        matches!(
            self,
            Error::SdpMaxIterations { .. }
                | Error::NotTight(_)
                | Error::NotPositiveDefinite(_)
                | Error::RankDeficientKkt(_)
                | Error::SingularCovariance
                | Error::LogSingularity { .. }
        )
    }
}
