//! Dense tensors, tape-based reverse-mode differentiation and Adam.

mod adam;
mod checkpoint;
mod tape;
mod tensor;

pub use adam::{AdamState, DEFAULT_LR};
pub use checkpoint::{Checkpoint, StoredParam, CHECKPOINT_FORMAT};
pub use tape::{sigmoid, Tape, Var, LAYER_NORM_EPS};
pub use tensor::{ParamId, ParamStore, Tensor};
