use super::{config_fingerprint, EvalConfig, EvalReport, Table};
use crate::data::{mask_positions, Color, Corpus, Direction, ShapeKind, Vocabulary};
use crate::error::{Error, Result};
use crate::model::{ForwardState, Model};
use crate::tensor::Tape;
use crate::train::{argmax, tokenize_captions};

/// Caption slot a cloze question masks.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Slot {
    Color,
    Shape,
    Direction,
}

impl Slot {
    pub const ALL: [Slot; 3] = [Slot::Color, Slot::Shape, Slot::Direction];

    pub fn name(self) -> &'static str {
        match self {
            Slot::Color => "color",
            Slot::Shape => "shape",
            Slot::Direction => "direction",
        }
    }

    fn words(self) -> Vec<&'static str> {
        match self {
            Slot::Color => Color::ALL.iter().map(|c| c.word()).collect(),
            Slot::Shape => ShapeKind::ALL.iter().map(|s| s.word()).collect(),
            Slot::Direction => Direction::ALL.iter().map(|d| d.word()).collect(),
        }
    }
}

/// Position of the first id in `ids` naming a value of `slot`.
pub fn slot_position(ids: &[usize], vocab: &Vocabulary, slot: Slot) -> Option<usize> {
    let words = slot.words();
    ids.iter().position(|&i| vocab.token(i).is_some_and(|w| words.contains(&w)))
}

struct Question {
    record: usize,
    slot: Slot,
    pos: usize,
    target: usize,
    ids: Vec<usize>,
}

/// Masks each slot word in turn and scores the top-1 fill. For the first
/// `export_items` records, also exports the dot product of the masked
/// word's output with every patch output, flagged where it exceeds the
/// mean plus one standard deviation.
pub fn eval_cloze(model: &Model, corpus: &Corpus, cfg: &EvalConfig, seed: u64) -> Result<EvalReport> {
    let indices = cfg.indices(corpus.len())?;
    if indices.is_empty() {
        return Err(Error::Validation("cloze needs at least one item".into()));
    }
    let ids = tokenize_captions(corpus, model)?;
    let mut questions = Vec::new();
    for &record in &indices {
        for slot in Slot::ALL {
            let pos = slot_position(&ids[record], &corpus.vocab, slot).ok_or_else(|| {
                Error::Validation(format!(
                    "record {record}: caption {:?} has no {} word",
                    corpus.captions[record],
                    slot.name()
                ))
            })?;
            let masked = mask_positions(&ids[record], &[pos]);
            questions.push(Question { record, slot, pos, target: ids[record][pos], ids: masked.ids });
        }
    }

    let (s, n) = (model.config.frames, model.config.patches_per_frame());
    let exported: Vec<usize> = indices.iter().copied().take(cfg.export_items).collect();
    let mut table = Table::new(&["record", "slot", "target", "predicted", "frame", "patch", "similarity", "highlight"]);
    let mut hits = [0usize; 3];
    let mut totals = [0usize; 3];
    let start = std::time::Instant::now();
    for chunk in questions.chunks(cfg.batch_size) {
        let clips: Vec<&[f32]> = chunk.iter().map(|q| corpus.clips[q.record].frames.as_slice()).collect();
        let texts: Vec<Vec<usize>> = chunk.iter().map(|q| q.ids.clone()).collect();
        let tape = Tape::new();
        let p = model.params.bind(&tape, false);
        let out = model.forward_multimodal(&p, &clips, &texts, &mut ForwardState::eval(seed))?;
        let logits = out.mlm_logits.value();
        let text = out.text_states.value();
        let patches = out.patch_states.value();
        let (m, v, d) = (logits.shape()[1], logits.shape()[2], text.shape()[2]);
        for (b, q) in chunk.iter().enumerate() {
            let row = &logits.data()[(b * m + q.pos) * v..(b * m + q.pos + 1) * v];
            let pred = argmax(row);
            let k = q.slot as usize;
            totals[k] += 1;
            hits[k] += usize::from(pred == q.target);
            if !exported.contains(&q.record) {
                continue;
            }
            let word = &text.data()[(b * m + q.pos) * d..(b * m + q.pos + 1) * d];
            let sims: Vec<f64> = (0..s * n)
                .map(|j| {
                    let patch = &patches.data()[(b * s * n + j) * d..(b * s * n + j + 1) * d];
                    word.iter().zip(patch).map(|(a, c)| a * c).sum()
                })
                .collect();
            let mean = sims.iter().sum::<f64>() / sims.len() as f64;
            let std = (sims.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / sims.len() as f64).sqrt();
            let word_of = |id: usize| corpus.vocab.token(id).unwrap_or("?").to_string();
            for (j, sim) in sims.iter().enumerate() {
                table.push(vec![
                    q.record.to_string(),
                    q.slot.name().into(),
                    word_of(q.target),
                    word_of(pred),
                    (j / n).to_string(),
                    (j % n).to_string(),
                    format!("{sim:.6}"),
                    u8::from(*sim > mean + std).to_string(),
                ]);
            }
        }
    }

    let mut report = EvalReport::new("eval-cloze", config_fingerprint(&model.config), seed);
    report.set("items", indices.len() as f64);
    for slot in Slot::ALL {
        let k = slot as usize;
        report.set(&format!("{}_accuracy", slot.name()), hits[k] as f64 / totals[k] as f64);
        report.set(&format!("{}_chance_accuracy", slot.name()), 1.0 / slot.words().len() as f64);
    }
    report.table = Some(table);
    report.time("score_seconds", start.elapsed().as_secs_f64());
    report.validate()?;
    Ok(report)
}
