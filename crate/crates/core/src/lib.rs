//! Two-stream video scene recognition over precomputed feature files.
//!
//! A temporal stream (order-aware CLS transformer over keyframe features)
//! and a knowledge-enhanced non-temporal stream (region fusion plus
//! keyword-conditioned soft clustering) are trained jointly with mutual
//! self-distillation on their hierarchical label scores; only the temporal
//! stream runs at inference time.
//!
//! The crate is generic over the scalar width through [`Scalar`]: 64-bit
//! for verification (gradient checks and the oracles are stated at f64
//! tolerances) and 32-bit for faster training. Concrete aliases for the
//! common types live at the crate root.

pub mod blocks;
pub mod checkpoint;
pub mod config;
pub mod error;
pub mod gradcheck;
pub mod hierarchy;
pub mod infer;
pub mod kft;
pub mod knowledge;
pub mod loss;
pub mod manifest;
pub mod metrics;
pub mod model;
pub mod nontemporal;
pub mod ops;
pub mod optim;
pub mod scalar;
pub mod scores;
pub mod store;
pub mod synth;
pub mod temporal;
pub mod tensor;
pub mod train;

pub use config::Config;
pub use error::{Error, Result};
pub use hierarchy::LabelHierarchy;
pub use manifest::{load_manifest, Manifest, Split, VideoRecord};
pub use model::{ModelSnapshot, TwoStreamModel};
pub use ops::Mode;
pub use scalar::{Dtype, Scalar};
pub use scores::ScoreSheet;
pub use store::ParameterStore;
pub use tensor::{backward, no_grad, DenseTensor};

pub type Tensor32 = DenseTensor<f32>;
pub type Tensor64 = DenseTensor<f64>;
pub type Store32 = ParameterStore<f32>;
pub type Store64 = ParameterStore<f64>;
pub type Model32 = TwoStreamModel<f32>;
pub type Model64 = TwoStreamModel<f64>;
