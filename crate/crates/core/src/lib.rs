//! Ordinal regression as autoregressive prediction of binary label
//! sequences over a dichotomic tree, with a masked decision decoder.

pub mod cli;
pub mod codec;
pub mod databench;
pub mod decoder;
pub mod error;
pub mod io;
pub mod numerics;
pub mod training;

pub use codec::{CategoryId, DichotomicTree, MultiHotSequence, PathCode, ShiftedTarget, Token};
pub use error::{Error, Result};
