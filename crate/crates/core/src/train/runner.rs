use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::config::TrainConfig;
use super::losses::{argmax_accuracy, mlm_loss, vtc_loss, vtm_loss};
use super::optim::{adamw_step, global_norm, lr_at, AdamState};
use crate::data::corpus::{make_vtm_pair, Corpus};
use crate::data::masking::mask_tokens;
use crate::data::vocab::tokenize;
use crate::error::{Error, Result};
use crate::model::{save_checkpoint, ForwardState, Model};
use crate::rng::SplitMix64;
use crate::tensor::{Tape, Tensor, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub step: usize,
    pub lr: f64,
    pub loss: f64,
    pub vtm_loss: Option<f64>,
    pub mlm_loss: Option<f64>,
    pub vtc_loss: Option<f64>,
    pub vtm_acc: Option<f64>,
    pub mlm_acc: Option<f64>,
    pub grad_norm: f64,
}

pub struct TrainOutcome {
    pub model: Model,
    pub metrics: Vec<MetricRow>,
}

/// Which objectives drive retrieval fine-tuning.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RetrievalObjective {
    Vtm,
    Vtc,
    Both,
}

impl RetrievalObjective {
    pub fn name(self) -> &'static str {
        match self {
            RetrievalObjective::Vtm => "vtm",
            RetrievalObjective::Vtc => "vtc",
            RetrievalObjective::Both => "both",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "vtm" => Some(RetrievalObjective::Vtm),
            "vtc" => Some(RetrievalObjective::Vtc),
            "both" => Some(RetrievalObjective::Both),
            _ => None,
        }
    }
}

/// Tokenizes every caption of `corpus` to the model's text length.
pub fn tokenize_captions(corpus: &Corpus, model: &Model) -> Result<Vec<Vec<usize>>> {
    if corpus.vocab.len() != model.config.vocab_size {
        return Err(Error::Contract(format!(
            "corpus vocabulary has {} tokens, model expects {}",
            corpus.vocab.len(),
            model.config.vocab_size
        )));
    }
    corpus.captions.iter().map(|c| tokenize(c, &corpus.vocab, model.config.max_text).map(|t| t.ids)).collect()
}

/// Epoch-wise shuffled draws from `0..len`.
struct Sampler {
    order: Vec<usize>,
    pos: usize,
    rng: SplitMix64,
}

impl Sampler {
    fn new(len: usize, rng: SplitMix64) -> Self {
        Self { order: (0..len).collect(), pos: len, rng }
    }

    fn next(&mut self) -> usize {
        if self.pos == self.order.len() {
            self.rng.shuffle(&mut self.order);
            self.pos = 0;
        }
        self.pos += 1;
        self.order[self.pos - 1]
    }
}

struct StepStats {
    loss: f64,
    vtm: Option<(f64, f64)>,
    mlm: Option<(f64, f64)>,
    vtc: Option<f64>,
}

fn scalar(v: Var<'_>) -> f64 {
    v.value().item()
}

/// Trains on the records `indices` of `corpus` with the objectives whose
/// weights are positive. Writes `metrics.jsonl` and `model.ckpt` (plus
/// periodic checkpoints) under `out` when given.
pub fn train(
    mut model: Model,
    corpus: &Corpus,
    indices: &[usize],
    cfg: &TrainConfig,
    out: Option<&Path>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    model.config.validate()?;
    if corpus.dims.frames != model.config.frames
        || corpus.dims.channels != model.config.channels
        || corpus.dims.height != model.config.height
        || corpus.dims.width != model.config.width
    {
        return Err(Error::DimMismatch(format!("corpus clips {:?} do not fit the model config", corpus.dims)));
    }
    if let Some(bad) = indices.iter().find(|&&i| i >= corpus.len()) {
        return Err(Error::Contract(format!("training index {bad} outside corpus of {}", corpus.len())));
    }
    let (use_vtm, use_mlm, use_vtc) = (cfg.w_vtm > 0.0, cfg.w_mlm > 0.0, cfg.w_vtc > 0.0);
    if cfg.total_steps > 0 && !(use_vtm || use_mlm || use_vtc) {
        return Err(Error::Config("every objective weight is zero".into()));
    }
    if cfg.total_steps > 0 && indices.len() < 2 {
        return Err(Error::Contract("training needs at least 2 records".into()));
    }
    let ids = tokenize_captions(corpus, &model)?;

    let mut metrics_file = match out {
        Some(dir) => {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            let path = dir.join("metrics.jsonl");
            Some((std::fs::File::create(&path).map_err(|e| Error::io(&path, e))?, path))
        }
        None => None,
    };

    let mut sampler = Sampler::new(indices.len(), SplitMix64::stream(cfg.seed, "batches"));
    let mut neg_rng = SplitMix64::stream(cfg.seed, "negatives");
    let mut mask_rng = SplitMix64::stream(cfg.seed, "masking");
    let mut drop_rng = SplitMix64::stream(cfg.seed, "dropout");
    let mut adam = AdamState::default();
    let mut metrics = Vec::new();

    for step in 0..cfg.total_steps {
        let items: Vec<usize> = (0..cfg.batch_size).map(|_| sampler.next()).collect();
        let n_vtm = match (use_vtm, use_mlm) {
            (true, true) => items.len().div_ceil(2),
            (true, false) => items.len(),
            _ => 0,
        };
        let n_mlm = if use_mlm { items.len() - n_vtm } else { 0 };

        let mut clips: Vec<&[f32]> = Vec::new();
        let mut texts: Vec<Vec<usize>> = Vec::new();
        let mut vtm_labels = Vec::new();
        for &pos in &items[..n_vtm] {
            let pair = make_vtm_pair(indices.len(), pos, cfg.neg_prob, &mut neg_rng)?;
            clips.push(&corpus.clips[indices[pair.clip]].frames);
            texts.push(ids[indices[pair.caption]].clone());
            vtm_labels.push(pair.label);
        }
        let mut mlm_labels = Vec::new();
        for &pos in &items[n_vtm..n_vtm + n_mlm] {
            let rec = indices[pos];
            let masked = mask_tokens(&ids[rec], cfg.mask_prob, &mut mask_rng, true);
            clips.push(&corpus.clips[rec].frames);
            texts.push(masked.ids);
            mlm_labels.push(masked.labels);
        }

        let tape = if cfg.single_precision { Tape::single_precision() } else { Tape::new() };
        let p = model.params.bind(&tape, true);
        let mut st = ForwardState::train(drop_rng.clone());
        let mut terms: Vec<(f64, Var)> = Vec::new();
        let mut stats = StepStats { loss: 0.0, vtm: None, mlm: None, vtc: None };
        let diag = |e: Error| match e {
            Error::NonFinite(s) => Error::NonFinite(format!("step {step}: {s}")),
            e => e,
        };

        if !clips.is_empty() {
            let out = model.forward_multimodal(&p, &clips, &texts, &mut st).map_err(diag)?;
            if n_vtm > 0 {
                let logits = out.vtm_logits.slice(0, 0, n_vtm)?;
                let loss = vtm_loss(logits, &vtm_labels)?;
                let acc = argmax_accuracy(logits.value().data(), 2, &vtm_labels);
                stats.vtm = Some((scalar(loss), acc));
                terms.push((cfg.w_vtm, loss));
            }
            if n_mlm > 0 {
                let logits = out.mlm_logits.slice(0, n_vtm, n_mlm)?;
                let loss = mlm_loss(logits, &mlm_labels)?;
                let v = model.config.vocab_size;
                let lv = logits.value();
                let mut rows = Vec::new();
                let mut targets = Vec::new();
                for (b, labels) in mlm_labels.iter().enumerate() {
                    for &(pos, id) in labels {
                        let at = (b * model.config.max_text + pos) * v;
                        rows.extend_from_slice(&lv.data()[at..at + v]);
                        targets.push(id);
                    }
                }
                stats.mlm = Some((scalar(loss), argmax_accuracy(&rows, v, &targets)));
                terms.push((cfg.w_mlm, loss));
            }
        }
        if use_vtc {
            let vclips: Vec<&[f32]> = items.iter().map(|&i| corpus.clips[indices[i]].frames.as_slice()).collect();
            let vtexts: Vec<Vec<usize>> = items.iter().map(|&i| ids[indices[i]].clone()).collect();
            let video = model.forward_unimodal(&p, None, Some(&vclips), &mut st).map_err(diag)?;
            let text = model.forward_unimodal(&p, Some(&vtexts), None, &mut st).map_err(diag)?;
            let loss = vtc_loss(video, text, cfg.temperature)?;
            stats.vtc = Some(scalar(loss));
            terms.push((cfg.w_vtc, loss));
        }
        drop_rng = st.rng;

        let total = weighted_sum(&terms)?;
        stats.loss = scalar(total);
        if !stats.loss.is_finite() {
            return Err(Error::NonFinite(format!("step {step}: loss is {}", stats.loss)));
        }
        let grads = tape.backward(total)?;
        let mut by_name: BTreeMap<String, Tensor> =
            p.iter().map(|(name, var)| (name.to_string(), grads.wrt(var).clone())).collect();
        let norm = global_norm(&by_name);
        if !norm.is_finite() {
            return Err(Error::NonFinite(format!("step {step}: gradient norm is {norm}")));
        }
        if cfg.clip_norm > 0.0 && norm > cfg.clip_norm {
            let s = cfg.clip_norm / norm;
            for g in by_name.values_mut() {
                *g = g.map(|v| v * s);
            }
        }
        let lr = lr_at(step, cfg);
        adamw_step(&mut model.params, &by_name, &mut adam, cfg, lr)?;

        let last = step + 1 == cfg.total_steps;
        if cfg.log_every > 0 && (step % cfg.log_every == 0 || last) || (cfg.log_every == 0 && last) {
            let row = MetricRow {
                step,
                lr,
                loss: stats.loss,
                vtm_loss: stats.vtm.map(|s| s.0),
                mlm_loss: stats.mlm.map(|s| s.0),
                vtc_loss: stats.vtc,
                vtm_acc: stats.vtm.map(|s| s.1),
                mlm_acc: stats.mlm.map(|s| s.1),
                grad_norm: norm,
            };
            if let Some((file, path)) = metrics_file.as_mut() {
                let line = serde_json::to_string(&row).map_err(|e| Error::Validation(e.to_string()))?;
                writeln!(file, "{line}").map_err(|e| Error::io(path.as_path(), e))?;
            }
            metrics.push(row);
        }
        if let Some(dir) = out {
            if cfg.checkpoint_every > 0 && (step + 1) % cfg.checkpoint_every == 0 && !last {
                save_checkpoint(&dir.join(format!("checkpoint-{:06}.ckpt", step + 1)), &model)?;
            }
        }
    }
    if let Some(dir) = out {
        save_checkpoint(&dir.join("model.ckpt"), &model)?;
    }
    Ok(TrainOutcome { model, metrics })
}

/// `sum_i w_i * L_i`.
pub fn weighted_sum<'t>(terms: &[(f64, Var<'t>)]) -> Result<Var<'t>> {
    let mut iter = terms.iter();
    let (w, first) = iter.next().ok_or_else(|| Error::Contract("no loss terms".into()))?;
    let mut total = first.scale(*w)?;
    for (w, term) in iter {
        total = total.add(term.scale(*w)?)?;
    }
    Ok(total)
}

/// Matching plus masked-language pretraining.
pub fn pretrain(
    model: Model,
    corpus: &Corpus,
    indices: &[usize],
    cfg: &TrainConfig,
    out: Option<&Path>,
) -> Result<TrainOutcome> {
    let cfg = TrainConfig { w_vtc: 0.0, ..cfg.clone() };
    train(model, corpus, indices, &cfg, out)
}

/// Retrieval fine-tuning with matching, contrastive, or both objectives.
pub fn finetune_retrieval(
    model: Model,
    corpus: &Corpus,
    indices: &[usize],
    cfg: &TrainConfig,
    objective: RetrievalObjective,
    out: Option<&Path>,
) -> Result<TrainOutcome> {
    let or_one = |w: f64| if w > 0.0 { w } else { 1.0 };
    let (w_vtm, w_vtc) = match objective {
        RetrievalObjective::Vtm => (or_one(cfg.w_vtm), 0.0),
        RetrievalObjective::Vtc => (0.0, or_one(cfg.w_vtc)),
        RetrievalObjective::Both => (or_one(cfg.w_vtm), or_one(cfg.w_vtc)),
    };
    let cfg = TrainConfig { w_mlm: 0.0, w_vtm, w_vtc, ..cfg.clone() };
    train(model, corpus, indices, &cfg, out)
}
