//! Small pre-LN transformer blocks: configuration, weights, the float
//! reference forward, conversion and the spike-driven forward.

pub mod config;
pub mod convert;
pub mod float;
pub mod spike;
pub mod weights;

pub use config::{ActivationDistribution, FfnKind, ModelConfig, Seeds};
pub use convert::{calibration_sample, convert, ConvertedBlock};
pub use float::{float_forward, float_forward_traced, FloatTrace};
pub use weights::WeightSet;
pub use spike::{spike_forward, EncoderKind, LayerDeviation, RunOptions, RunTrace};
