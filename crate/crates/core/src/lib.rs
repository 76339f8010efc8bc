//! Physics-based underwater image synthesis and a dense-residual CNN that
//! learns to undo it.
//!
//! The crate is organized bottom-up:
//!
//! - [`tensor`]: dense `H × W × C` tensors with hand-written forward/backward
//!   primitives (3×3 convolution, ReLU, channel concatenation, addition).
//! - [`model`]: the enhancement network (blocks of conv-ReLU pairs, dense
//!   concatenation with the input, final residual convolution).
//! - [`loss`]: MSE + windowed-SSIM training objective with analytic gradients.
//! - [`optim`]: the ADAM optimizer.
//! - [`watersim`]: light-attenuation image formation for ten Jerlov water types.
//! - [`quality`]: full-reference MSE / PSNR / SSIM on the 8-bit scale.
//! - [`color`]: HSI conversion and saturation/intensity range stretching.
//! - [`imageio`]: PNG/PNM images, depth maps, manifests and checkpoints.
//! - [`train`] and [`cli`]: the training loop and command-line front end.

pub mod cli;
pub mod color;
pub mod error;
pub mod imageio;
pub mod loss;
pub mod model;
pub mod optim;
pub mod quality;
pub mod scene;
pub mod tensor;
pub mod train;
pub mod verify;
pub mod watersim;

pub use error::{Error, Result};
pub use model::{Model, ModelConfig};
pub use tensor::Tensor;
pub use watersim::WaterType;
