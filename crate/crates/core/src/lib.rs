//! Lossless image compression through multi-level super-resolution.
//!
//! An image is reduced to a small base image by repeated exact 2×2 average
//! pooling. The base is stored raw together with the 2-bit rounding residual
//! of every pooling step, and each finer level is arithmetic-coded under
//! autoregressive discretized-logistic-mixture distributions predicted by a
//! per-level convolutional network.
//!
//! Modules, bottom-up:
//!
//! * [`pyramid`]: integer pooling pyramid, rounding residuals, block geometry.
//! * [`coder`]: range coder over 16-bit quantized CDFs.
//! * [`mixture`]: discretized logistic mixtures, range truncation, NLL.
//! * [`network`]: tensors, convolutions and the super-resolution network.
//! * [`trainer`]: reverse-mode gradients, loss and optimization loop.
//! * [`codec`]: container format, compression, statistics and sampling.

pub mod codec;
pub mod coder;
pub mod mixture;
pub mod network;
pub mod pyramid;
pub mod trainer;

mod error;

pub use error::{Error, Result};
pub use pyramid::Image;
