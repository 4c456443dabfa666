use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid depth {0} (must be > 0)")]
    InvalidDepth(f64),
    #[error("point is behind the camera (z = {0})")]
    BehindCamera(f64),
    #[error("invalid camera intrinsics: {0}")]
    InvalidIntrinsics(String),
    #[error("image dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("class `{0}` has no labeled pixels in any training image")]
    EmptyClass(&'static str),
    #[error("training set is empty")]
    EmptyTrainingSet,
    #[error("degenerate dataset: {0}")]
    DegenerateDataset(String),

    #[error("joint {joint} value {value} outside limits [{lower}, {upper}]")]
    JointLimit {
        joint: usize,
        value: f64,
        lower: f64,
        upper: f64,
    },
    #[error("Jacobian is ill-conditioned (sigma ratio {ratio:.3e})")]
    IllConditioned { ratio: f64 },
    #[error("reduced Jacobian is rank deficient")]
    RankDeficient,
    #[error("actuator command {value} outside stroke [{lower}, {upper}]")]
    StrokeViolation { value: f64, lower: f64, upper: f64 },
    #[error("inverse kinematics did not converge (residual {0:.3e})")]
    IkNoConvergence(f64),

    #[error("normal equations are singular; variable {0} is unconstrained")]
    SingularNormalEquations(usize),
    #[error("factor references unknown variable {0}")]
    UnknownVariable(usize),
    #[error("noise matrix is not symmetric positive definite")]
    NotPositiveDefinite,
    #[error("no flower track with id {0}")]
    UnknownTrack(usize),

    #[error("no collision-free path found after {0} samples")]
    NoPath(usize),
    #[error("degenerate planning problem: {0}")]
    DegeneratePlan(String),

    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("bad file format in {path}: {reason}")]
    Format { path: PathBuf, reason: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Image(#[from] image::ImageError),
}

pub type Result<T> = std::result::Result<T, Error>;
