use alloc::string::String;

pub type Result<T> = core::result::Result<T, Error>;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("mesh has no faces")]
    EmptyMesh,
    #[error("degenerate mesh: {0}")]
    DegenerateMesh(String),
    #[error("invalid mesh: {0}")]
    InvalidMesh(String),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("length mismatch: expected {expected}, got {got}")]
    LengthMismatch { expected: usize, got: usize },
    #[error("topology mismatch: {0}")]
    TopologyMismatch(String),
    #[error("eigensolver failed: {0}")]
    SolverFailure(String),
    #[error("backward root must be a scalar, got shape {0:?}")]
    NonScalarRoot(alloc::vec::Vec<usize>),
    #[error("non-finite value produced by {0}")]
    NonFiniteValue(String),
    #[error("bad configuration: {0}")]
    BadConfig(String),
    #[error("bad head parameters: {0}")]
    BadParams(String),
    #[error("operators do not match mesh: {0}")]
    OperatorMismatch(String),
    #[error("landmark annotations missing")]
    MissingLandmarks,
    #[error("penetration metric needs at least two components")]
    SingleComponent,
}
