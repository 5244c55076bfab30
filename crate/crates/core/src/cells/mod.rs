//! Recurrent cell blocks and the stacked predictor.

pub mod ce;
pub mod gates;
pub mod model;
pub mod se;

pub use ce::{CeBlock, CeOutput};
pub use gates::Gates;
pub use model::{
    frame_at, CellOutput, CellState, CmsCell, CmsModel, FrameDiagnostics, Rollout, Teacher,
};
pub use se::{attention_mass, bam, Qkv, SeBlock, SeOutput};
