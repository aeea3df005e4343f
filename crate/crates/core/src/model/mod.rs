//! The shared video-language encoder: embeddings, per-frame joint
//! sequences, pre-norm blocks with a temporal operator before each, and
//! the task heads.
//!
//! A per-frame sequence is `[t_class, w_1..w_m, v_class, p_1..p_n]`. Text
//! is replicated into every frame; the video-level representation is the
//! mean of the text class outputs over frames.

mod checkpoint;
mod config;
mod forward;
mod params;

use std::sync::atomic::{AtomicU64, Ordering};

pub use checkpoint::{checkpoint_bytes, checkpoint_from_bytes, load_checkpoint, save_checkpoint, CHECKPOINT_VERSION};
pub use config::ModelConfig;
pub use forward::{AttentionCapture, ForwardState, MultimodalOutput};
pub use params::{Bound, ParameterStore};

use crate::error::Result;
use crate::rng::SplitMix64;
use crate::tensor::{Tape, Tensor};

#[derive(Debug)]
pub struct Model {
    pub config: ModelConfig,
    pub params: ParameterStore,
    embed_calls: AtomicU64,
}

impl Clone for Model {
    fn clone(&self) -> Self {
        Self::from_parts(self.config.clone(), self.params.clone())
    }
}

impl Model {
    /// Fresh parameters drawn from the `model-init` stream of `seed`.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        let params = ParameterStore::init(&config, &mut SplitMix64::stream(seed, "model-init"))?;
        Ok(Self::from_parts(config, params))
    }

    pub fn from_parts(config: ModelConfig, params: ParameterStore) -> Self {
        Self { config, params, embed_calls: AtomicU64::new(0) }
    }

    /// Items embedded by [`Model::forward_unimodal`] since construction.
    pub fn embed_calls(&self) -> u64 {
        self.embed_calls.load(Ordering::Relaxed)
    }

    pub fn reset_embed_calls(&self) {
        self.embed_calls.store(0, Ordering::Relaxed);
    }

    /// Normalized text embeddings with frozen parameters, `[B, vtc_dim]`.
    pub fn embed_texts(&self, ids: &[Vec<usize>]) -> Result<Tensor> {
        let tape = Tape::new();
        let p = self.params.bind(&tape, false);
        let out = self.forward_unimodal(&p, Some(ids), None, &mut ForwardState::eval(0))?;
        Ok((*out.value()).clone())
    }

    /// Normalized video embeddings with frozen parameters, `[B, vtc_dim]`.
    pub fn embed_videos(&self, clips: &[&[f32]]) -> Result<Tensor> {
        let tape = Tape::new();
        let p = self.params.bind(&tape, false);
        let out = self.forward_unimodal(&p, None, Some(clips), &mut ForwardState::eval(0))?;
        Ok((*out.value()).clone())
    }
}
