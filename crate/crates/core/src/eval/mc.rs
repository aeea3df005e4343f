use super::{check_indices, config_fingerprint, EvalConfig, EvalReport, Table};
use crate::data::{render_caption, tokenize, ClipSpec, Color, Corpus, Direction, ShapeKind};
use crate::error::{Error, Result};
use crate::model::{ForwardState, Model};
use crate::rng::SplitMix64;
use crate::tensor::Tape;
use crate::train::argmax;

/// One multiple-choice question: a clip and its candidate captions.
#[derive(Clone, Debug, PartialEq)]
pub struct McItem {
    pub record: usize,
    pub candidates: Vec<Vec<usize>>,
    /// What each candidate changes: `truth`, `color`, `shape` or `direction`.
    pub kinds: Vec<&'static str>,
    pub answer: usize,
}

impl McItem {
    pub fn validate(&self) -> Result<()> {
        let k = self.candidates.len();
        if k < 2 || self.kinds.len() != k || self.answer >= k {
            return Err(Error::Validation(format!("record {}: {k} candidates, answer {}", self.record, self.answer)));
        }
        let truth = &self.candidates[self.answer];
        for (i, c) in self.candidates.iter().enumerate() {
            if i != self.answer && c == truth {
                return Err(Error::Validation(format!(
                    "record {}: candidate {i} equals the true caption",
                    self.record
                )));
            }
        }
        Ok(())
    }
}

fn other<T: Copy + PartialEq>(all: &[T], not: &[T], rng: &mut SplitMix64) -> T {
    let pool: Vec<T> = all.iter().copied().filter(|x| !not.contains(x)).collect();
    pool[rng.index(pool.len())]
}

/// Builds the question for each record: the true caption plus one color
/// swap, one shape swap and two different direction swaps, shuffled.
pub fn build_mc_items(corpus: &Corpus, indices: &[usize], max_text: usize, seed: u64) -> Result<Vec<McItem>> {
    check_indices(corpus, indices)?;
    let mut rng = SplitMix64::stream(seed, "mc-distractors");
    let mut items = Vec::with_capacity(indices.len());
    for &record in indices {
        let truth = corpus.clips[record].spec;
        let moving = |s: ClipSpec| ClipSpec { speed: s.speed.max(1), ..s };
        let d1 = other(Direction::ALL, &[truth.direction], &mut rng);
        let d2 = other(Direction::ALL, &[truth.direction, d1], &mut rng);
        let mut specs = vec![
            ("truth", truth),
            ("color", ClipSpec { color: other(Color::ALL, &[truth.color], &mut rng), ..truth }),
            ("shape", ClipSpec { shape: other(ShapeKind::ALL, &[truth.shape], &mut rng), ..truth }),
            ("direction", moving(ClipSpec { direction: d1, ..truth })),
            ("direction", moving(ClipSpec { direction: d2, ..truth })),
        ];
        rng.shuffle(&mut specs);
        let mut candidates = Vec::with_capacity(specs.len());
        for (_, s) in &specs {
            candidates.push(tokenize(&render_caption(s), &corpus.vocab, max_text)?.ids);
        }
        let answer = specs.iter().position(|(k, _)| *k == "truth").unwrap();
        let item = McItem { record, candidates, kinds: specs.iter().map(|(k, _)| *k).collect(), answer };
        item.validate()?;
        items.push(item);
    }
    Ok(items)
}

/// Matching logit (class 1) of `clip` against every candidate, in order.
pub fn mc_scores(model: &Model, clip: &[f32], candidates: &[Vec<usize>]) -> Result<Vec<f64>> {
    let clips = vec![clip; candidates.len()];
    score_pairs(model, &clips, candidates)
}

fn score_pairs(model: &Model, clips: &[&[f32]], texts: &[Vec<usize>]) -> Result<Vec<f64>> {
    let tape = Tape::new();
    let p = model.params.bind(&tape, false);
    let out = model.forward_multimodal(&p, clips, texts, &mut ForwardState::eval(0))?;
    Ok(out.vtm_logits.value().data().chunks(2).map(|r| r[1]).collect())
}

/// Accuracy of picking the highest-scoring candidate, ties to the lowest index.
pub fn eval_mc(model: &Model, corpus: &Corpus, cfg: &EvalConfig, seed: u64) -> Result<EvalReport> {
    let indices = cfg.indices(corpus.len())?;
    if indices.is_empty() {
        return Err(Error::Validation("multiple choice needs at least one item".into()));
    }
    let items = build_mc_items(corpus, &indices, model.config.max_text, seed)?;
    let k = items[0].candidates.len();
    let per_batch = (cfg.batch_size / k).max(1);
    let start = std::time::Instant::now();
    let mut scores: Vec<Vec<f64>> = Vec::with_capacity(items.len());
    for chunk in items.chunks(per_batch) {
        let mut clips = Vec::new();
        let mut texts = Vec::new();
        for item in chunk {
            for c in &item.candidates {
                clips.push(corpus.clips[item.record].frames.as_slice());
                texts.push(c.clone());
            }
        }
        let flat = score_pairs(model, &clips, &texts)?;
        scores.extend(flat.chunks(k).map(<[f64]>::to_vec));
    }

    let mut table = Table::new(&["record", "answer", "predicted", "predicted_kind", "correct"]);
    let (mut hits, mut dir_hits) = (0usize, 0usize);
    for (item, s) in items.iter().zip(&scores) {
        let pick = argmax(s);
        hits += usize::from(pick == item.answer);
        // Same question restricted to the truth and its direction swaps.
        let sub: Vec<usize> = (0..k).filter(|&i| matches!(item.kinds[i], "truth" | "direction")).collect();
        let sub_scores: Vec<f64> = sub.iter().map(|&i| s[i]).collect();
        dir_hits += usize::from(sub[argmax(&sub_scores)] == item.answer);
        table.push(vec![
            item.record.to_string(),
            item.answer.to_string(),
            pick.to_string(),
            item.kinds[pick].to_string(),
            u8::from(pick == item.answer).to_string(),
        ]);
    }
    let n = items.len() as f64;
    let mut report = EvalReport::new("eval-mc", config_fingerprint(&model.config), seed);
    report.set("items", n);
    report.set("candidates", k as f64);
    report.set("accuracy", hits as f64 / n);
    report.set("direction_accuracy", dir_hits as f64 / n);
    report.set("chance_accuracy", 1.0 / k as f64);
    report.table = Some(table);
    report.time("score_seconds", start.elapsed().as_secs_f64());
    report.validate()?;
    Ok(report)
}
