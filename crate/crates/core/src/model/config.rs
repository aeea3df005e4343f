use crate::config::KeyValues;
use crate::error::{Error, Result};
use crate::rolling::{RollingConfig, Selection, TemporalMode};

/// Architecture hyperparameters.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub dim: usize,
    pub layers: usize,
    pub heads: usize,
    /// Side of a square patch, in pixels.
    pub patch: usize,
    pub frames: usize,
    /// Text length `m`, including the leading `[CLS]` id.
    pub max_text: usize,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub vocab_size: usize,
    /// MLP hidden width as a multiple of `dim`.
    pub mlp_ratio: usize,
    pub temporal: TemporalMode,
    pub rolling: RollingConfig,
    pub channel_shift_ratio: f64,
    pub use_pos_embed: bool,
    pub use_type_embed: bool,
    /// Reuse frame 0's patch position embeddings for every frame.
    pub share_frame_pos: bool,
    pub vtc_dim: usize,
    pub qa_answers: usize,
    pub dropout: f64,
    pub init_std: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl ModelConfig {
    /// Desk-scale default: 32x32 frames, 8px patches, 3 frames.
    pub fn desk() -> Self {
        Self {
            dim: 64,
            layers: 4,
            heads: 4,
            patch: 8,
            frames: 3,
            max_text: 16,
            channels: 3,
            height: 32,
            width: 32,
            vocab_size: 19,
            mlp_ratio: 4,
            temporal: TemporalMode::Rolling,
            rolling: RollingConfig::default(),
            channel_shift_ratio: 0.25,
            use_pos_embed: true,
            use_type_embed: true,
            share_frame_pos: false,
            vtc_dim: 64,
            qa_answers: 16,
            dropout: 0.0,
            init_std: 0.02,
        }
    }

    fn preset(dim: usize, heads: usize) -> Self {
        Self { dim, heads, layers: 12, patch: 16, height: 224, width: 224, max_text: 40, vtc_dim: 256, ..Self::desk() }
    }

    /// Tiny variant: 192 wide, 3 heads, 12 layers.
    pub fn tiny() -> Self {
        Self::preset(192, 3)
    }

    /// Small variant: 384 wide, 6 heads, 12 layers.
    pub fn small() -> Self {
        Self::preset(384, 6)
    }

    /// Base variant: 768 wide, 12 heads, 12 layers.
    pub fn base() -> Self {
        Self::preset(768, 12)
    }

    pub fn preset_by_name(name: &str) -> Option<Self> {
        match name {
            "desk" => Some(Self::desk()),
            "tiny" | "ti" => Some(Self::tiny()),
            "small" | "s" => Some(Self::small()),
            "base" | "b" => Some(Self::base()),
            _ => None,
        }
    }

    /// Patch tokens per frame, `n`.
    pub fn patches_per_frame(&self) -> usize {
        (self.height / self.patch) * (self.width / self.patch)
    }

    pub fn patch_dim(&self) -> usize {
        self.patch * self.patch * self.channels
    }

    /// Text block length: class token plus `m` ids.
    pub fn text_len(&self) -> usize {
        self.max_text + 1
    }

    /// Video block length per frame: class token plus `n` patches.
    pub fn frame_len(&self) -> usize {
        self.patches_per_frame() + 1
    }

    pub fn head_dim(&self) -> usize {
        self.dim / self.heads
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Contract(format!("model config: {msg}")));
        if self.dim == 0 || self.heads == 0 || self.dim % self.heads != 0 {
            return bad(format!("dim {} not divisible by heads {}", self.dim, self.heads));
        }
        if self.patch == 0 || self.height % self.patch != 0 || self.width % self.patch != 0 {
            return bad(format!("{}x{} frames not divisible by patch {}", self.height, self.width, self.patch));
        }
        if self.frames == 0 || self.max_text == 0 || self.vocab_size == 0 || self.channels == 0 {
            return bad("frames, max_text, vocab_size and channels must be positive".into());
        }
        if self.mlp_ratio == 0 || self.vtc_dim == 0 || self.qa_answers == 0 {
            return bad("mlp_ratio, vtc_dim and qa_answers must be positive".into());
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout {} outside [0, 1)", self.dropout));
        }
        self.rolling.validate(self.patches_per_frame())
    }

    /// Applies every model key present in `kv`, consuming it.
    pub fn apply(&mut self, kv: &mut KeyValues) -> Result<()> {
        if let Some(name) = kv.take::<String>("preset")? {
            *self = Self::preset_by_name(&name).ok_or_else(|| Error::Config(format!("unknown preset {name}")))?;
        }
        kv.take_into("dim", &mut self.dim)?;
        kv.take_into("layers", &mut self.layers)?;
        kv.take_into("heads", &mut self.heads)?;
        kv.take_into("patch", &mut self.patch)?;
        kv.take_into("frames", &mut self.frames)?;
        kv.take_into("max_text", &mut self.max_text)?;
        kv.take_into("channels", &mut self.channels)?;
        kv.take_into("height", &mut self.height)?;
        kv.take_into("width", &mut self.width)?;
        kv.take_into("vocab_size", &mut self.vocab_size)?;
        kv.take_into("mlp_ratio", &mut self.mlp_ratio)?;
        if let Some(t) = kv.take::<String>("temporal")? {
            self.temporal =
                TemporalMode::parse(&t).ok_or_else(|| Error::Config(format!("unknown temporal mode {t}")))?;
        }
        kv.take_into("rolling_ratio", &mut self.rolling.ratio)?;
        if let Some(s) = kv.take::<String>("rolling_selection")? {
            self.rolling.selection =
                Selection::parse(&s).ok_or_else(|| Error::Config(format!("unknown selection {s}")))?;
        }
        kv.take_into("rolling_start_layer", &mut self.rolling.start_layer)?;
        kv.take_into("rolling_block_offset", &mut self.rolling.block_offset)?;
        kv.take_into("channel_shift_ratio", &mut self.channel_shift_ratio)?;
        kv.take_into("use_pos_embed", &mut self.use_pos_embed)?;
        kv.take_into("use_type_embed", &mut self.use_type_embed)?;
        kv.take_into("share_frame_pos", &mut self.share_frame_pos)?;
        kv.take_into("vtc_dim", &mut self.vtc_dim)?;
        kv.take_into("qa_answers", &mut self.qa_answers)?;
        kv.take_into("dropout", &mut self.dropout)?;
        kv.take_into("init_std", &mut self.init_std)?;
        Ok(())
    }

    pub fn to_key_values(&self) -> KeyValues {
        let mut kv = KeyValues::default();
        kv.insert("dim", self.dim);
        kv.insert("layers", self.layers);
        kv.insert("heads", self.heads);
        kv.insert("patch", self.patch);
        kv.insert("frames", self.frames);
        kv.insert("max_text", self.max_text);
        kv.insert("channels", self.channels);
        kv.insert("height", self.height);
        kv.insert("width", self.width);
        kv.insert("vocab_size", self.vocab_size);
        kv.insert("mlp_ratio", self.mlp_ratio);
        kv.insert("temporal", self.temporal.name());
        kv.insert("rolling_ratio", self.rolling.ratio);
        kv.insert("rolling_selection", self.rolling.selection.name());
        kv.insert("rolling_start_layer", self.rolling.start_layer);
        kv.insert("rolling_block_offset", self.rolling.block_offset);
        kv.insert("channel_shift_ratio", self.channel_shift_ratio);
        kv.insert("use_pos_embed", self.use_pos_embed);
        kv.insert("use_type_embed", self.use_type_embed);
        kv.insert("share_frame_pos", self.share_frame_pos);
        kv.insert("vtc_dim", self.vtc_dim);
        kv.insert("qa_answers", self.qa_answers);
        kv.insert("dropout", self.dropout);
        kv.insert("init_std", self.init_std);
        kv
    }

    pub fn from_key_values(mut kv: KeyValues) -> Result<Self> {
        let mut cfg = Self::desk();
        cfg.apply(&mut kv)?;
        kv.finish()?;
        cfg.validate()?;
        Ok(cfg)
    }
}
