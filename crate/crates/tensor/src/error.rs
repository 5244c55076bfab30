use thiserror::Error;

pub type Result<T> = std::result::Result<T, TensorError>;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum TensorError {
    #[error("{op}: shape mismatch {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("invalid shape {shape:?}: {reason}")]
    InvalidShape { shape: Vec<usize>, reason: String },

    #[error("{op}: expected rank {expected}, got shape {shape:?}")]
    Rank {
        op: &'static str,
        expected: usize,
        shape: Vec<usize>,
    },

    #[error("axis {axis} out of range for rank {rank}")]
    Axis { axis: usize, rank: usize },

    #[error("split sizes {sizes:?} do not sum to axis length {len}")]
    Split { sizes: Vec<usize>, len: usize },

    #[error("patch grid {grid} does not divide spatial size {height}x{width}")]
    PatchGrid {
        grid: usize,
        height: usize,
        width: usize,
    },

    #[error("kernel size {0} must be odd and square")]
    Kernel(usize),

    #[error("backward root must have shape [1], got {0:?}")]
    NonScalarRoot(Vec<usize>),

    #[error("empty input list for {0}")]
    Empty(&'static str),
}
