//! Cross-modality MR translation and segmentation on synthetic phantoms:
//! two unpaired slice translators (cycle-consistent and query-selected
//! contrastive), a U-Net segmenter trained on their pooled outputs, a
//! pseudo-label self-training loop, and Dice/ASSD evaluation with paired
//! t-tests — all deterministic given a master seed.

pub mod checkpoint;
pub mod error;
pub mod losses;
pub mod metrics;
pub mod nn;
pub mod phantom;
pub mod pipeline;
pub mod qsattn;
pub mod translators;
pub mod report;
pub mod rng;
pub mod segmenter;
pub mod selftrain;
pub mod stats;
pub mod volume;

pub use error::{Error, Result};
