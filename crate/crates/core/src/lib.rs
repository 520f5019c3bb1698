//! Brain-tissue segmentation with an encoder–decoder CNN that reuses max-pool
//! indices for upsampling and carries a single skip connection at full
//! resolution, plus the patch pipeline, SGD trainer and Dice evaluation around it.

pub mod cli;
pub mod error;
pub mod eval;
pub mod net;
pub mod patch;
pub mod tensor;
pub mod train;
pub mod volume;

pub use error::{Error, ErrorKind, Result};
