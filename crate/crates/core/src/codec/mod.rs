//! Container format, compression, statistics and sampling.
//!
//! A file holds the coarsest pyramid level raw, the packed rounding
//! residuals of every pooling step and one arithmetic-coded stream per
//! level. Levels are coded coarse to fine; inside a level, step by step
//! (top-left, top-right, bottom-left pixels of each block), then channel by
//! channel, blocks in raster order. The bottom-right pixel of a block, or
//! its last real pixel at the border, follows from the block average and is
//! never coded.

mod container;
mod engine;
pub mod io;
mod predict;
mod stats;
pub mod synth;

pub use container::{
    level_size, pack_codes, packed_len, unpack_codes, Container, PredictorKind, HEADER_LEN, MAGIC,
};
pub use engine::{compress, decompress, image_digest, sample, CodingReport, Constraints, Options};
pub use predict::{CnnModel, Predictor};
pub use stats::{StatsReport, StatsRow};
