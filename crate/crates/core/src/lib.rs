//! Character-level transformer laboratory with energy-gated attention.
//!
//! The numerical core is generic over the floating-point type; the aliases
//! below fix it for training (`f32`) and verification (`f64`).

pub mod analysis;
pub mod autodiff;
pub mod data;
pub mod error;
pub mod gates;
pub mod model;
pub mod padding;
pub mod params;
pub mod plot;
pub mod rng;
pub mod scalar;
pub mod trainer;
pub mod wavelets;

pub use error::{CheckpointError, Error, Result};
pub use gates::{GateVariant, ZNormMode};
pub use model::{ModelConfig, TransformerModel};
pub use scalar::Scalar;

pub type Model32 = TransformerModel<f32>;
pub type Model64 = TransformerModel<f64>;
pub type Tape32 = autodiff::Tape<f32>;
pub type Tape64 = autodiff::Tape<f64>;
pub type Trainer32 = trainer::Trainer<f32>;
