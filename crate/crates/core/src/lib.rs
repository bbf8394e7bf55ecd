//! Conversion of small float transformer blocks into spike-driven
//! equivalents whose decoded outputs track the float block.

pub mod calibration;
pub mod energy;
pub mod error;
pub mod model;
pub mod neurons;
pub mod spikeops;
pub mod tensors;

pub use error::{Error, Result};
pub use tensors::Matrix;
