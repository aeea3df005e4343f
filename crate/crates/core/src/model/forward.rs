use std::rc::Rc;

use super::params::Bound;
use super::Model;
use crate::data::vocab::PAD;
use crate::error::{Error, Result};
use crate::rng::SplitMix64;
use crate::rolling::{frame_roll_map, roll_index_map, TemporalMode};
use crate::tensor::{Tensor, Var};

/// Per-call state threaded through a forward pass: the random stream for
/// dropout and random token selection, plus instrumentation.
pub struct ForwardState {
    pub rng: SplitMix64,
    pub train: bool,
    pub capture: bool,
    pub attention: Vec<AttentionCapture>,
    /// Attention score entries computed, summed over heads and layers.
    pub score_entries: u64,
}

impl ForwardState {
    pub fn eval(seed: u64) -> Self {
        Self {
            rng: SplitMix64::stream(seed, "forward"),
            train: false,
            capture: false,
            attention: Vec::new(),
            score_entries: 0,
        }
    }

    pub fn train(rng: SplitMix64) -> Self {
        Self { rng, train: true, capture: false, attention: Vec::new(), score_entries: 0 }
    }

    pub fn with_capture(mut self) -> Self {
        self.capture = true;
        self
    }
}

/// Softmax weights of one head in one block, `[N, T, T]`.
#[derive(Clone, Debug)]
pub struct AttentionCapture {
    /// 1-based block index.
    pub layer: usize,
    pub head: usize,
    pub weights: Rc<Tensor>,
    /// Patch positions rolled in before this block (empty when nothing rolled).
    pub rolled: Vec<usize>,
    pub key_mask: Rc<Vec<bool>>,
}

/// Where the patch rows sit inside each per-frame sequence.
#[derive(Clone, Copy, Debug)]
struct FramePlan {
    clips: usize,
    frames: usize,
    offset: usize,
    patches: usize,
}

pub struct MultimodalOutput<'t> {
    /// `[B, 2]`.
    pub vtm_logits: Var<'t>,
    /// `[B, m, |V|]`.
    pub mlm_logits: Var<'t>,
    /// Consensus of the text class token over frames, `[B, D]`.
    pub pooled: Var<'t>,
    /// Frame-averaged text outputs at the `m` id positions, `[B, m, D]`.
    pub text_states: Var<'t>,
    /// Final patch outputs, `[B, S, n, D]`.
    pub patch_states: Var<'t>,
}

fn tag_layer(layer: usize) -> impl Fn(Error) -> Error {
    move |e| match e {
        Error::NonFinite(s) => Error::NonFinite(format!("encoder layer {layer}: {s}")),
        e => e,
    }
}

impl Model {
    /// Text tokens `[B, m + 1, D]` (class token first) and the key mask,
    /// `true` at `[PAD]` ids. Short inputs are padded to `m`.
    pub fn embed_text<'t>(&self, p: &Bound<'t>, ids: &[Vec<usize>]) -> Result<(Var<'t>, Vec<bool>)> {
        let cfg = &self.config;
        let m = cfg.max_text;
        let mut rows = Vec::with_capacity(ids.len() * (m + 1));
        let mut mask = Vec::with_capacity(ids.len() * (m + 1));
        for seq in ids {
            if seq.len() > m {
                return Err(Error::Contract(format!("text of {} ids exceeds m = {m}", seq.len())));
            }
            if let Some(bad) = seq.iter().find(|&&i| i >= cfg.vocab_size) {
                return Err(Error::Contract(format!("token id {bad} >= vocabulary size {}", cfg.vocab_size)));
            }
            rows.push(0);
            mask.push(false);
            for t in 0..m {
                let id = seq.get(t).copied().unwrap_or(PAD);
                rows.push(id + 1);
                mask.push(id == PAD);
            }
        }
        let table = Var::concat(&[p.get("embed.text_cls")?, p.get("embed.word")?], 0)?;
        let mut x = table.gather_rows(&rows)?.reshape(&[ids.len(), m + 1, cfg.dim])?;
        if cfg.use_pos_embed {
            x = x.add(p.get("embed.text_pos")?)?;
        }
        if cfg.use_type_embed {
            x = x.add(p.get("embed.text_type")?)?;
        }
        Ok((x, mask))
    }

    /// Non-overlapping patches of every frame, `[B * S * n, P * P * C]`.
    fn patchify(&self, clips: &[&[f32]]) -> Result<Tensor> {
        let cfg = &self.config;
        let (c, h, w, ps) = (cfg.channels, cfg.height, cfg.width, cfg.patch);
        let frame_len = c * h * w;
        let per_clip = cfg.frames * frame_len;
        let (gh, gw) = (h / ps, w / ps);
        let mut data = Vec::with_capacity(clips.len() * cfg.frames * gh * gw * cfg.patch_dim());
        for clip in clips {
            if clip.len() != per_clip {
                return Err(Error::Contract(format!(
                    "clip has {} values, expected {} ({} frames of {c}x{h}x{w})",
                    clip.len(),
                    per_clip,
                    cfg.frames
                )));
            }
            for f in 0..cfg.frames {
                let frame = &clip[f * frame_len..(f + 1) * frame_len];
                for py in 0..gh {
                    for px in 0..gw {
                        for ch in 0..c {
                            for r in 0..ps {
                                let start = ch * h * w + (py * ps + r) * w + px * ps;
                                data.extend(frame[start..start + ps].iter().map(|&v| v as f64));
                            }
                        }
                    }
                }
            }
        }
        Tensor::new(vec![clips.len() * cfg.frames * gh * gw, cfg.patch_dim()], data)
    }

    /// Video tokens `[B, S, n + 1, D]`, class token first in each frame.
    pub fn embed_video<'t>(&self, p: &Bound<'t>, clips: &[&[f32]]) -> Result<Var<'t>> {
        let cfg = &self.config;
        let (b, s, n, d) = (clips.len(), cfg.frames, cfg.patches_per_frame(), cfg.dim);
        let tape = p.get("embed.patch.weight")?.tape();
        let patches = tape.constant(self.patchify(clips)?);
        let tokens =
            patches.matmul(p.get("embed.patch.weight")?)?.add(p.get("embed.patch.bias")?)?.reshape(&[b, s, n, d])?;
        let cls = p.get("embed.video_cls")?.gather_rows(&vec![0; b * s])?.reshape(&[b, s, 1, d])?;
        let mut x = Var::concat(&[cls, tokens], 2)?;
        if cfg.use_pos_embed {
            let pos = p.get("embed.video_pos")?;
            let pos = if cfg.share_frame_pos {
                let rows: Vec<usize> = (0..s).flat_map(|_| 0..n + 1).collect();
                pos.gather_rows(&rows)?
            } else {
                pos
            };
            x = x.add(pos.reshape(&[s, n + 1, d])?)?;
        }
        if cfg.use_type_embed {
            x = x.add(p.get("embed.video_type")?)?;
        }
        Ok(x)
    }

    /// Lifts a per-clip `[S * n]` slot map onto the rows of `[N, T, D]`.
    fn lifted_map(plan: FramePlan, tokens: usize, slot_map: &[usize]) -> Vec<usize> {
        let (s, n) = (plan.frames, plan.patches);
        let mut map: Vec<usize> = (0..plan.clips * s * tokens).collect();
        for b in 0..plan.clips {
            for i in 0..s {
                for j in 0..n {
                    let src = slot_map[i * n + j];
                    let (si, sj) = (src / n, src % n);
                    map[(b * s + i) * tokens + plan.offset + j] = (b * s + si) * tokens + plan.offset + sj;
                }
            }
        }
        map
    }

    /// The temporal operator applied before block `layer`. Returns the
    /// rolled patch positions alongside the new tokens.
    fn temporal<'t>(
        &self,
        x: Var<'t>,
        plan: FramePlan,
        layer: usize,
        st: &mut ForwardState,
    ) -> Result<(Var<'t>, Vec<usize>)> {
        let cfg = &self.config;
        let shape = x.shape();
        let (rows, t, d) = (shape[0] * shape[1], shape[1], shape[2]);
        if plan.frames < 2 {
            return Ok((x, Vec::new()));
        }
        match cfg.temporal {
            TemporalMode::Flatten => Ok((x, Vec::new())),
            TemporalMode::Rolling => {
                if !cfg.rolling.active_at(layer, plan.patches) {
                    return Ok((x, Vec::new()));
                }
                let slot_map = roll_index_map(plan.frames, plan.patches, &cfg.rolling, layer, Some(&mut st.rng))?;
                let slots: Vec<usize> = (0..plan.patches).filter(|&j| slot_map[j] != j).collect();
                let map = Self::lifted_map(plan, t, &slot_map);
                let y = x.reshape(&[rows, d])?.permute_tokens(&map)?.reshape(&shape)?;
                Ok((y, slots))
            }
            TemporalMode::ChannelShift => {
                let k = (cfg.channel_shift_ratio * d as f64 + 1e-9).floor() as usize;
                if layer < cfg.rolling.start_layer || k == 0 {
                    return Ok((x, Vec::new()));
                }
                let frame_map = frame_roll_map(plan.frames);
                let slot_map: Vec<usize> = (0..plan.frames * plan.patches)
                    .map(|s| frame_map[s / plan.patches] * plan.patches + s % plan.patches)
                    .collect();
                let map = Self::lifted_map(plan, t, &slot_map);
                let shifted = x.reshape(&[rows, d])?.permute_tokens(&map)?.reshape(&shape)?;
                if k >= d {
                    return Ok((shifted, Vec::new()));
                }
                let y = Var::concat(&[shifted.slice(2, 0, k)?, x.slice(2, k, d - k)?], 2)?;
                Ok((y, Vec::new()))
            }
        }
    }

    fn attention<'t>(
        &self,
        p: &Bound<'t>,
        prefix: &str,
        h: Var<'t>,
        mask: &Rc<Vec<bool>>,
        layer: usize,
        rolled: &[usize],
        st: &mut ForwardState,
    ) -> Result<Var<'t>> {
        let cfg = &self.config;
        let shape = h.shape();
        let (n, t, d) = (shape[0], shape[1], shape[2]);
        let dh = cfg.head_dim();
        let qkv =
            h.matmul(p.get(&format!("{prefix}.attn.qkv.weight"))?)?.add(p.get(&format!("{prefix}.attn.qkv.bias"))?)?;
        let inv = 1.0 / (dh as f64).sqrt();
        let mut heads = Vec::with_capacity(cfg.heads);
        for head in 0..cfg.heads {
            let q = qkv.slice(2, head * dh, dh)?;
            let k = qkv.slice(2, d + head * dh, dh)?;
            let v = qkv.slice(2, 2 * d + head * dh, dh)?;
            let weights = q.matmul(k.transpose()?)?.scale(inv)?.masked_fill(mask)?.softmax()?;
            st.score_entries += (n * t * t) as u64;
            if st.capture {
                st.attention.push(AttentionCapture {
                    layer,
                    head,
                    weights: weights.value(),
                    rolled: rolled.to_vec(),
                    key_mask: Rc::clone(mask),
                });
            }
            heads.push(weights.matmul(v)?);
        }
        let joined = if heads.len() == 1 { heads[0] } else { Var::concat(&heads, 2)? };
        joined.matmul(p.get(&format!("{prefix}.attn.out.weight"))?)?.add(p.get(&format!("{prefix}.attn.out.bias"))?)
    }

    fn block<'t>(
        &self,
        p: &Bound<'t>,
        x: Var<'t>,
        mask: &Rc<Vec<bool>>,
        layer: usize,
        rolled: &[usize],
        st: &mut ForwardState,
    ) -> Result<Var<'t>> {
        let prefix = format!("blocks.{}", layer - 1);
        let get = |s: &str| p.get(&format!("{prefix}.{s}"));
        let drop = self.config.dropout;

        let h = x.layer_norm(get("ln1.gamma")?, get("ln1.beta")?)?;
        let mut a = self.attention(p, &prefix, h, mask, layer, rolled, st)?;
        if st.train && drop > 0.0 {
            a = a.dropout(drop, &mut st.rng)?;
        }
        let x = x.add(a)?;

        let h = x.layer_norm(get("ln2.gamma")?, get("ln2.beta")?)?;
        let mut f = h
            .matmul(get("mlp.fc1.weight")?)?
            .add(get("mlp.fc1.bias")?)?
            .gelu()?
            .matmul(get("mlp.fc2.weight")?)?
            .add(get("mlp.fc2.bias")?)?;
        if st.train && drop > 0.0 {
            f = f.dropout(drop, &mut st.rng)?;
        }
        x.add(f)
    }

    /// Runs every block and the final norm over `[N, T, D]` sequences.
    fn encode<'t>(
        &self,
        p: &Bound<'t>,
        mut x: Var<'t>,
        mask: Vec<bool>,
        plan: Option<FramePlan>,
        st: &mut ForwardState,
    ) -> Result<Var<'t>> {
        let mask = Rc::new(mask);
        for layer in 1..=self.config.layers {
            let rolled = match plan {
                Some(plan) => {
                    let (y, rolled) = self.temporal(x, plan, layer, st)?;
                    x = y;
                    rolled
                }
                None => Vec::new(),
            };
            x = self.block(p, x, &mask, layer, &rolled, st).map_err(tag_layer(layer))?;
            if !x.value().is_finite() {
                return Err(Error::NonFinite(format!("encoder layer {layer}: non-finite activation")));
            }
        }
        if self.config.layers == 0 {
            return Ok(x);
        }
        x.layer_norm(p.get("final_norm.gamma")?, p.get("final_norm.beta")?)
    }

    /// Token states after the encoder for paired inputs, before any head.
    /// Per-frame modes return `[B, S, m + n + 2, D]`; flatten returns
    /// `[B, m + 1 + S (n + 1), D]`.
    pub fn encode_joint<'t>(
        &self,
        p: &Bound<'t>,
        clips: &[&[f32]],
        ids: &[Vec<usize>],
        st: &mut ForwardState,
    ) -> Result<Var<'t>> {
        let cfg = &self.config;
        let b = clips.len();
        if b == 0 || ids.len() != b {
            return Err(Error::Contract(format!("{} clips paired with {} texts", b, ids.len())));
        }
        let (s, n, d, m1) = (cfg.frames, cfg.patches_per_frame(), cfg.dim, cfg.text_len());
        let (text, text_mask) = self.embed_text(p, ids)?;
        let video = self.embed_video(p, clips)?;
        match cfg.temporal {
            TemporalMode::Flatten => {
                let seq = Var::concat(&[text, video.reshape(&[b, s * (n + 1), d])?], 1)?;
                let mut mask = Vec::with_capacity(b * (m1 + s * (n + 1)));
                for row in text_mask.chunks(m1) {
                    mask.extend_from_slice(row);
                    mask.extend(std::iter::repeat(false).take(s * (n + 1)));
                }
                self.encode(p, seq, mask, None, st)
            }
            TemporalMode::Rolling | TemporalMode::ChannelShift => {
                let rows: Vec<usize> = (0..b).flat_map(|i| (0..s).flat_map(move |_| i * m1..(i + 1) * m1)).collect();
                let text = text.reshape(&[b * m1, d])?.gather_rows(&rows)?.reshape(&[b, s, m1, d])?;
                let t = m1 + n + 1;
                let seq = Var::concat(&[text, video], 2)?.reshape(&[b * s, t, d])?;
                let mut mask = Vec::with_capacity(b * s * t);
                for row in text_mask.chunks(m1) {
                    for _ in 0..s {
                        mask.extend_from_slice(row);
                        mask.extend(std::iter::repeat(false).take(n + 1));
                    }
                }
                let plan = FramePlan { clips: b, frames: s, offset: m1 + 1, patches: n };
                self.encode(p, seq, mask, Some(plan), st)?.reshape(&[b, s, t, d])
            }
        }
    }

    /// Joint forward over paired clips and texts.
    pub fn forward_multimodal<'t>(
        &self,
        p: &Bound<'t>,
        clips: &[&[f32]],
        ids: &[Vec<usize>],
        st: &mut ForwardState,
    ) -> Result<MultimodalOutput<'t>> {
        let cfg = &self.config;
        let (b, s, n, d, m) = (clips.len(), cfg.frames, cfg.patches_per_frame(), cfg.dim, cfg.max_text);
        let out = self.encode_joint(p, clips, ids, st)?;
        let (pooled, text_states, patch_states) = match cfg.temporal {
            TemporalMode::Flatten => {
                let pooled = out.slice(1, 0, 1)?.reshape(&[b, d])?;
                let text = out.slice(1, 1, m)?;
                let video = out.slice(1, m + 1, s * (n + 1))?.reshape(&[b, s, n + 1, d])?;
                (pooled, text, video.slice(2, 1, n)?)
            }
            _ => {
                let pooled = out.slice(2, 0, 1)?.reshape(&[b, s, d])?.mean_axis(1)?;
                let text = out.slice(2, 1, m)?.mean_axis(1)?;
                (pooled, text, out.slice(2, m + 2, n)?)
            }
        };
        let vtm_logits = pooled.matmul(p.get("head.vtm.weight")?)?.add(p.get("head.vtm.bias")?)?;
        let mlm_logits = text_states.matmul(p.get("head.mlm.weight")?)?.add(p.get("head.mlm.bias")?)?;
        Ok(MultimodalOutput { vtm_logits, mlm_logits, pooled, text_states, patch_states })
    }

    /// Answer logits from a pooled representation, `[B, answers]`.
    pub fn qa_logits<'t>(&self, p: &Bound<'t>, pooled: Var<'t>) -> Result<Var<'t>> {
        pooled
            .matmul(p.get("head.qa.fc1.weight")?)?
            .add(p.get("head.qa.fc1.bias")?)?
            .gelu()?
            .matmul(p.get("head.qa.fc2.weight")?)?
            .add(p.get("head.qa.fc2.bias")?)
    }

    /// Single-modality forward through the shared encoder, projected by the
    /// matching contrastive head and L2-normalized, `[B, vtc_dim]`.
    /// Exactly one of `text` and `video` must be given.
    pub fn forward_unimodal<'t>(
        &self,
        p: &Bound<'t>,
        text: Option<&[Vec<usize>]>,
        video: Option<&[&[f32]]>,
        st: &mut ForwardState,
    ) -> Result<Var<'t>> {
        let cfg = &self.config;
        let (s, n, d) = (cfg.frames, cfg.patches_per_frame(), cfg.dim);
        let (pooled, head, count) = match (text, video) {
            (Some(ids), None) => {
                if ids.is_empty() {
                    return Err(Error::Contract("unimodal forward with an empty batch".into()));
                }
                let (x, mask) = self.embed_text(p, ids)?;
                let out = self.encode(p, x, mask, None, st)?;
                (out.slice(1, 0, 1)?.reshape(&[ids.len(), d])?, "head.vtc_text", ids.len())
            }
            (None, Some(clips)) => {
                let b = clips.len();
                if b == 0 {
                    return Err(Error::Contract("unimodal forward with an empty batch".into()));
                }
                let x = self.embed_video(p, clips)?;
                let out = match cfg.temporal {
                    TemporalMode::Flatten => {
                        let seq = x.reshape(&[b, s * (n + 1), d])?;
                        self.encode(p, seq, vec![false; b * s * (n + 1)], None, st)?
                    }
                    _ => {
                        let seq = x.reshape(&[b * s, n + 1, d])?;
                        let plan = FramePlan { clips: b, frames: s, offset: 1, patches: n };
                        self.encode(p, seq, vec![false; b * s * (n + 1)], Some(plan), st)?
                    }
                };
                let cls = out.reshape(&[b, s, n + 1, d])?.slice(2, 0, 1)?.reshape(&[b, s, d])?.mean_axis(1)?;
                (cls, "head.vtc_video", b)
            }
            _ => return Err(Error::Contract("unimodal forward needs exactly one of text or video".into())),
        };
        self.embed_calls.fetch_add(count as u64, std::sync::atomic::Ordering::Relaxed);
        pooled.matmul(p.get(&format!("{head}.weight"))?)?.add(p.get(&format!("{head}.bias"))?)?.l2_normalize()
    }
}
