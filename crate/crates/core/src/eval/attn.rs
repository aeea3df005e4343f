use std::collections::BTreeMap;

use super::{config_fingerprint, EvalConfig, EvalReport, Table};
use crate::data::Corpus;
use crate::error::{Error, Result};
use crate::model::{AttentionCapture, ForwardState, Model};
use crate::rolling::TemporalMode;
use crate::tensor::Tape;
use crate::train::tokenize_captions;

/// Mean text-to-patch attention weight, per patch slot and split by
/// whether the slot was designated as rolled.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct SlotMass {
    pub per_slot: Vec<f64>,
    pub rolled: f64,
    pub unrolled: f64,
}

#[derive(Default)]
struct Accum {
    slot_sum: Vec<f64>,
    slot_count: Vec<f64>,
    rolled: (f64, f64),
    unrolled: (f64, f64),
}

impl Accum {
    fn new(n: usize) -> Self {
        Self { slot_sum: vec![0.0; n], slot_count: vec![0.0; n], ..Default::default() }
    }

    /// Adds every non-PAD text query row of `cap`, classifying key slots
    /// with `designated`.
    fn add(&mut self, cap: &AttentionCapture, text_len: usize, n: usize, designated: &[usize]) {
        let w = &cap.weights;
        let (rows, t) = (w.shape()[0], w.shape()[1]);
        let offset = text_len + 1;
        for r in 0..rows {
            for q in 0..text_len {
                if cap.key_mask[r * t + q] {
                    continue;
                }
                let base = (r * t + q) * t + offset;
                for j in 0..n {
                    let v = w.data()[base + j];
                    self.slot_sum[j] += v;
                    self.slot_count[j] += 1.0;
                    let bucket =
                        if designated.binary_search(&j).is_ok() { &mut self.rolled } else { &mut self.unrolled };
                    bucket.0 += v;
                    bucket.1 += 1.0;
                }
            }
        }
    }

    fn finish(&self) -> SlotMass {
        SlotMass {
            per_slot: self.slot_sum.iter().zip(&self.slot_count).map(|(s, c)| s / c.max(1.0)).collect(),
            rolled: self.rolled.0 / self.rolled.1.max(1.0),
            unrolled: self.unrolled.0 / self.unrolled.1.max(1.0),
        }
    }
}

fn check_pair(rolling: &Model, baseline: &Model) -> Result<()> {
    let (a, b) = (&rolling.config, &baseline.config);
    for cfg in [a, b] {
        if cfg.temporal == TemporalMode::Flatten {
            return Err(Error::Validation("attention distribution needs per-frame checkpoints, got flatten".into()));
        }
    }
    let geom = |c: &crate::model::ModelConfig| (c.frames, c.patches_per_frame(), c.max_text, c.layers, c.vocab_size);
    if geom(a) != geom(b) {
        return Err(Error::Validation(format!("checkpoint geometries differ: {:?} vs {:?}", geom(a), geom(b))));
    }
    if a.rolling.rolled_count(a.patches_per_frame()) == 0 {
        return Err(Error::Validation("the rolling checkpoint rolls no tokens, so no slot is designated".into()));
    }
    Ok(())
}

/// Text-to-patch attention mass of a rolling checkpoint and a baseline over
/// the same positive pairs, from block `start_layer` of the rolling model
/// on. The baseline's slots are classified with the rolling model's
/// designation at the same block and batch.
pub fn attention_distribution(
    rolling: &Model,
    baseline: &Model,
    corpus: &Corpus,
    cfg: &EvalConfig,
    seed: u64,
) -> Result<(EvalReport, SlotMass, SlotMass)> {
    check_pair(rolling, baseline)?;
    let indices = cfg.indices(corpus.len())?;
    if indices.is_empty() {
        return Err(Error::Validation("attention distribution needs at least one item".into()));
    }
    let ids = tokenize_captions(corpus, rolling)?;
    let c = &rolling.config;
    let (n, text_len, first) = (c.patches_per_frame(), c.text_len(), c.rolling.start_layer);
    let mut acc = [Accum::new(n), Accum::new(n)];
    let mut designated_count = vec![0usize; n];
    let mut designations = 0usize;

    for chunk in indices.chunks(cfg.batch_size) {
        let clips: Vec<&[f32]> = chunk.iter().map(|&i| corpus.clips[i].frames.as_slice()).collect();
        let texts: Vec<Vec<usize>> = chunk.iter().map(|&i| ids[i].clone()).collect();
        let mut caps = Vec::with_capacity(2);
        for model in [rolling, baseline] {
            let tape = Tape::new();
            let p = model.params.bind(&tape, false);
            let mut st = ForwardState::eval(seed).with_capture();
            model.forward_multimodal(&p, &clips, &texts, &mut st)?;
            caps.push(st.attention);
        }
        let mut by_layer: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
        for cap in &caps[0] {
            by_layer.entry(cap.layer).or_insert_with(|| cap.rolled.clone());
        }
        for (layer, slots) in &by_layer {
            if *layer >= first {
                designations += 1;
                for &j in slots {
                    designated_count[j] += 1;
                }
            }
        }
        for (which, list) in caps.iter().enumerate() {
            for cap in list.iter().filter(|c| c.layer >= first) {
                acc[which].add(cap, text_len, n, &by_layer[&cap.layer]);
            }
        }
    }

    let [r, b] = [acc[0].finish(), acc[1].finish()];
    let mut table = Table::new(&["slot", "rolled_fraction", "rolling_mass", "baseline_mass"]);
    for j in 0..n {
        table.push(vec![
            j.to_string(),
            format!("{:.4}", designated_count[j] as f64 / designations.max(1) as f64),
            format!("{:.8}", r.per_slot[j]),
            format!("{:.8}", b.per_slot[j]),
        ]);
    }
    let mut report = EvalReport::new("attn-dist", config_fingerprint(c), seed);
    report.set("items", indices.len() as f64);
    report.set("start_layer", first as f64);
    report.set("rolling_ratio", c.rolling.ratio);
    report.set("baseline_ratio", baseline.config.rolling.ratio);
    report.set("rolling_rolled_mass", r.rolled);
    report.set("rolling_unrolled_mass", r.unrolled);
    report.set("baseline_rolled_mass", b.rolled);
    report.set("baseline_unrolled_mass", b.unrolled);
    report.notes.push(format!("baseline fingerprint {}", config_fingerprint(&baseline.config)));
    if baseline.config.rolling.rolled_count(n) == 0 || baseline.config.temporal != TemporalMode::Rolling {
        report.notes.push(
            "the baseline rolls no tokens; its rolled slots are the rolling checkpoint's designation, which is vacuous for the baseline"
                .into(),
        );
    }
    report.table = Some(table);
    report.validate()?;
    Ok((report, r, b))
}
