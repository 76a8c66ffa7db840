//! Minimal reverse-mode differentiable compute core.

pub mod checkpoint;
pub mod gradcheck;
pub mod tape;
pub mod tensor;

pub use checkpoint::{load_named, save_named, CheckpointError, MAGIC};
pub use gradcheck::{gradient_check, GradCheckReport};
pub use tape::{Gradients, Tape, VarId};
pub use tensor::{AutodiffError, Tensor};
