//! Unified video-language transformer with temporal token rolling.
//!
//! A single shared encoder reads text tokens and per-frame patch tokens
//! together. Frames are attended independently; between blocks a fixed
//! fraction of each frame's patch tokens is rolled one step forward in
//! time, so per-frame attention sees neighbouring frames without extra
//! parameters.
//!
//! Modules, bottom-up:
//!
//! - [`tensor`]: dense tensors and a reverse-mode tape
//! - [`rng`]: the splittable generator every random stream derives from
//! - [`data`]: moving-shapes clips, captions, tokenizer, corpus files
//! - [`rolling`]: token rolling, its baselines, and attention cost counts
//! - [`model`]: embeddings, encoder, heads, checkpoints
//! - [`train`]: objectives, optimizer, schedules, training loops
//! - [`eval`]: multiple-choice, retrieval, cloze, attention analysis, benchmarks

pub mod config;
pub mod data;
pub mod error;
pub mod eval;
pub mod model;
pub mod rng;
pub mod rolling;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::{Tape, Tensor, Var};
