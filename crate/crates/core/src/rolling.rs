//! Temporal token rolling and the parameter-free baselines it is compared
//! against.
//!
//! Visual tokens are laid out frame-major: slot `i * n + j` is patch `j` of
//! frame `i`. Rolling moves the selected patch positions of every frame one
//! step forward in time, cyclically: frame `i` receives them from frame
//! `i - 1 (mod S)`. Everything else stays put.

use crate::error::{Error, Result};
use crate::rng::SplitMix64;
use crate::tensor::Var;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Selection {
    /// A fixed contiguous block starting at `block_offset`.
    Block,
    /// A fresh uniform subset on every call.
    Random,
    /// A contiguous block that advances by its own length each layer,
    /// wrapping around the patch grid.
    Varying,
}

impl Selection {
    pub fn name(self) -> &'static str {
        match self {
            Selection::Block => "block",
            Selection::Random => "random",
            Selection::Varying => "varying",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "block" => Some(Selection::Block),
            "random" => Some(Selection::Random),
            "varying" => Some(Selection::Varying),
            _ => None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RollingConfig {
    /// Fraction of each frame's patch tokens that roll, in `[0, 1)`.
    pub ratio: f64,
    pub selection: Selection,
    /// First (1-based) encoder block that rolls.
    pub start_layer: usize,
    pub block_offset: usize,
}

impl Default for RollingConfig {
    fn default() -> Self {
        Self { ratio: 0.25, selection: Selection::Block, start_layer: 1, block_offset: 0 }
    }
}

impl RollingConfig {
    pub fn disabled() -> Self {
        Self { ratio: 0.0, ..Self::default() }
    }

    pub fn with_ratio(ratio: f64) -> Self {
        Self { ratio, ..Self::default() }
    }

    /// `floor(ratio * n)`.
    pub fn rolled_count(&self, n: usize) -> usize {
        // The small bias keeps products like 0.29 * 100 from flooring to 28.
        (self.ratio * n as f64 + 1e-9).floor() as usize
    }

    pub fn validate(&self, n: usize) -> Result<()> {
        if !(0.0..1.0).contains(&self.ratio) {
            return Err(Error::Contract(format!("rolling ratio {} outside [0, 1)", self.ratio)));
        }
        if self.start_layer == 0 {
            return Err(Error::Contract("rolling start_layer is 1-based".into()));
        }
        if self.block_offset + self.rolled_count(n) > n {
            return Err(Error::Contract(format!(
                "rolled block [{}, {}) exceeds {n} patch slots",
                self.block_offset,
                self.block_offset + self.rolled_count(n)
            )));
        }
        Ok(())
    }

    /// Whether block `layer` (1-based) rolls any token for `n` patches.
    pub fn active_at(&self, layer: usize, n: usize) -> bool {
        layer >= self.start_layer && self.rolled_count(n) > 0
    }

    /// Patch positions rolled at `layer`, sorted.
    pub fn selected_slots(&self, n: usize, layer: usize, rng: Option<&mut SplitMix64>) -> Result<Vec<usize>> {
        self.validate(n)?;
        if !self.active_at(layer, n) {
            return Ok(Vec::new());
        }
        let k = self.rolled_count(n);
        let mut slots: Vec<usize> = match self.selection {
            Selection::Block => (self.block_offset..self.block_offset + k).collect(),
            Selection::Varying => {
                let start = self.block_offset + (layer - self.start_layer) * k;
                (0..k).map(|t| (start + t) % n).collect()
            }
            Selection::Random => {
                let rng = rng.ok_or_else(|| Error::Contract("random selection needs an rng".into()))?;
                rng.sample_indices(n, k)
            }
        };
        slots.sort_unstable();
        Ok(slots)
    }
}

/// Source slot for every visual slot of `frames * n` after rolling at
/// `layer`: output slot `s` takes its token from slot `map[s]`.
pub fn roll_index_map(
    frames: usize,
    n: usize,
    config: &RollingConfig,
    layer: usize,
    rng: Option<&mut SplitMix64>,
) -> Result<Vec<usize>> {
    if frames == 0 || n == 0 {
        return Err(Error::Contract(format!("roll over {frames} frames of {n} patches")));
    }
    let slots = config.selected_slots(n, layer, rng)?;
    let mut map: Vec<usize> = (0..frames * n).collect();
    for i in 0..frames {
        let prev = (i + frames - 1) % frames;
        for &j in &slots {
            map[i * n + j] = prev * n + j;
        }
    }
    Ok(map)
}

/// Rolls visual tokens shaped `[S, n, D]`.
pub fn ttr<'t>(visual: Var<'t>, config: &RollingConfig, layer: usize, rng: Option<&mut SplitMix64>) -> Result<Var<'t>> {
    let shape = visual.shape();
    if shape.len() != 3 {
        return Err(Error::shape("ttr", format!("expected [S, n, D], got {shape:?}")));
    }
    let (frames, n, dim) = (shape[0], shape[1], shape[2]);
    let map = roll_index_map(frames, n, config, layer, rng)?;
    visual.reshape(&[frames * n, dim])?.permute_tokens(&map)?.reshape(&shape)
}

/// The flatten baseline's single sequence: `[text; frame 0; ...; frame S-1]`.
pub fn flatten_join<'t>(text: Var<'t>, visual: Var<'t>) -> Result<Var<'t>> {
    let (ts, vs) = (text.shape(), visual.shape());
    if ts.len() != 2 || vs.len() != 3 || ts[1] != vs[2] {
        return Err(Error::shape("flatten_join", format!("text {ts:?}, visual {vs:?}")));
    }
    let flat = visual.reshape(&[vs[0] * vs[1], vs[2]])?;
    Var::concat(&[text, flat], 0)
}

/// Inverse of [`flatten_join`].
pub fn flatten_split<'t>(joined: Var<'t>, m: usize, frames: usize, n: usize) -> Result<(Var<'t>, Var<'t>)> {
    let s = joined.shape();
    if s.len() != 2 || s[0] != m + frames * n {
        return Err(Error::shape("flatten_split", format!("{s:?} for m={m}, S={frames}, n={n}")));
    }
    let text = joined.slice(0, 0, m)?;
    let visual = joined.slice(0, m, frames * n)?.reshape(&[frames, n, s[1]])?;
    Ok((text, visual))
}

/// Frame map for a cyclic forward roll: frame `i` takes frame `i - 1`.
pub fn frame_roll_map(frames: usize) -> Vec<usize> {
    (0..frames).map(|i| (i + frames - 1) % frames).collect()
}

/// The channel-shift baseline on `[S, n, D]` tokens: the first
/// `floor(ratio * D)` channels of every token roll forward one frame.
pub fn channel_shift<'t>(visual: Var<'t>, ratio: f64) -> Result<Var<'t>> {
    let s = visual.shape();
    if s.len() != 3 {
        return Err(Error::shape("channel_shift", format!("expected [S, n, D], got {s:?}")));
    }
    if !(0.0..=1.0).contains(&ratio) {
        return Err(Error::Contract(format!("channel shift ratio {ratio} outside [0, 1]")));
    }
    let (frames, dim) = (s[0], s[2]);
    let k = (ratio * dim as f64 + 1e-9).floor() as usize;
    if k == 0 || frames == 1 {
        return Ok(visual);
    }
    let shifted = visual.slice(2, 0, k)?.permute_tokens(&frame_roll_map(frames))?;
    if k == dim {
        return Ok(shifted);
    }
    Var::concat(&[shifted, visual.slice(2, k, dim - k)?], 2)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TemporalMode {
    /// Per-frame attention with token rolling between blocks.
    Rolling,
    /// Per-frame attention with the channel-shift baseline.
    ChannelShift,
    /// One joint sequence over text and every frame.
    Flatten,
}

impl TemporalMode {
    pub fn name(self) -> &'static str {
        match self {
            TemporalMode::Rolling => "rolling",
            TemporalMode::ChannelShift => "channel_shift",
            TemporalMode::Flatten => "flatten",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "rolling" => Some(TemporalMode::Rolling),
            "channel_shift" => Some(TemporalMode::ChannelShift),
            "flatten" => Some(TemporalMode::Flatten),
            _ => None,
        }
    }
}

/// Attention score-matrix entries per head per layer for `m` text tokens
/// and `S` frames of `n` patch tokens.
///
/// Per-frame modes attend within each `m + n` sequence, `S (m + n)^2`; the
/// flatten baseline attends over everything at once, `(m + S n)^2`.
pub fn attention_flops(frames: u64, m: u64, n: u64, mode: TemporalMode) -> u64 {
    match mode {
        TemporalMode::Rolling | TemporalMode::ChannelShift => frames * (m + n) * (m + n),
        TemporalMode::Flatten => (m + frames * n) * (m + frames * n),
    }
}
