//! Conditional boundary-equilibrium GAN for 4x face super-resolution.
//!
//! Everything runs on the CPU through a small tensor core with hand-written
//! backward passes:
//!
//! - [`ops`]: strided convolution, transposed convolution, LeakyReLU, tanh,
//!   channel concatenation and the L1 loss, each with its gradient.
//! - [`gradcheck`]: a central-difference oracle for those gradients.
//! - [`model`]: the U-Net generator and the autoencoder discriminator.
//! - [`equilibrium`]: losses and the `k` controller.
//! - [`data`]: bicubic degradation, corpus splits and image I/O.
//! - [`train`]: Adam, the training step and the driver loop.
//! - [`checkpoint`]: the binary checkpoint format.
//! - [`eval`]: PSNR, comparison tables, inference and image grids.
//! - [`cli`]: the `fcgan` command.
//!
//! The `examples/` directory has one runnable program per capability.

pub mod checkpoint;
pub mod cli;
pub mod data;
pub mod equilibrium;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod model;
pub mod ops;
pub mod params;
pub mod tensor;
pub mod train;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
pub use data::{degrade, PairRecord, Split, SplitManifest};
pub use equilibrium::{EquilibriumState, LossReport};
pub use error::{Error, Result};
pub use eval::{psnr, MetricRow};
pub use model::{DiscriminatorSpec, GeneratorSpec, WidthMultiplier};
pub use params::ParameterSet;
pub use tensor::Tensor;
pub use train::{fit, TrainConfig, TrainState};
