//! Coarse-to-fine segmentation toolkit.
//!
//! A localization network finds the target region in the full frame, the
//! frame is cropped around the predicted region, and a fine network segments
//! the crop. Both networks are U-shaped encoder/decoders built from
//! depthwise-separable convolutions and inverted-bottleneck blocks, with an
//! attention gate on every skip connection.
//!
//! Everything runs on the small tape-based autodiff engine in [`autograd`],
//! in 64-bit floating point, on the CPU.

pub mod ablation;
pub mod attention;
pub mod autograd;
pub mod cascade;
pub mod error;
pub mod image;
mod kernels;
pub mod layers;
pub mod metrics;
pub mod net;
pub mod par;
pub mod phantom;
pub mod rng;
pub mod tensor;
pub mod train;

pub use autograd::{Graph, Var};
pub use error::{Error, Result};
pub use net::{ModelConfig, Network};
pub use tensor::Tensor;
