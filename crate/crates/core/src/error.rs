use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum GeometryError {
    #[error("degenerate input: {0}")]
    DegenerateInput(String),
    #[error("not a rotation matrix: {0}")]
    NotARotation(String),
    #[error("heading is vertical; yaw undefined")]
    VerticalHeading,
}

#[derive(Debug, Error)]
pub enum VoxelError {
    #[error("point cloud is empty")]
    EmptyCloud,
    #[error("voxel size must be positive and finite, got {0}")]
    InvalidVoxelSize(f64),
    #[error("non-finite coordinate at point {0}")]
    NonFinite(usize),
    #[error("cloud file: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum TargetError {
    #[error("token set has no real (unmasked) tokens")]
    NoRealTokens,
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("sigma and enlarge must be positive (sigma={sigma}, enlarge={enlarge})")]
    BadKernel { sigma: f64, enlarge: f64 },
    #[error(transparent)]
    Geometry(#[from] GeometryError),
}

#[derive(Debug, Error)]
pub enum NnError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("non-finite values produced by {0}")]
    NonFinite(String),
    #[error("unknown parameter `{0}`")]
    UnknownParameter(String),
    #[error("duplicate parameter name `{0}`")]
    DuplicateParameter(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Error)]
pub enum SceneError {
    #[error("could not place object {index} after {attempts} attempts")]
    PlacementFailure { index: usize, attempts: usize },
    #[error("invalid scene config: {0}")]
    InvalidConfig(String),
    #[error("scene needs at least two objects, has {0}")]
    TooFewObjects(usize),
    #[error("ambiguous episode: {0}")]
    AmbiguousEpisode(String),
    #[error("line {line}: field `{field}`: {msg}")]
    Schema {
        line: usize,
        field: String,
        msg: String,
    },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum EvalError {
    #[error("length mismatch: {0} predictions vs {1} ground truths")]
    LengthMismatch(usize, usize),
}

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("unknown token `{0}`")]
    UnknownToken(String),
    #[error("question text is empty")]
    EmptyQuestion,
    #[error("unknown mode `{0}`")]
    UnknownMode(String),
    #[error("unknown rotation representation `{0}`")]
    UnknownRotationRepr(String),
    #[error("invalid config field `{field}`: {msg}")]
    Config { field: String, msg: String },
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Target(#[from] TargetError),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error(transparent)]
    Voxel(#[from] VoxelError),
    #[error(transparent)]
    Scene(#[from] SceneError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}
