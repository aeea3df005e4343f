use std::time::Instant;

use super::{config_fingerprint, median, EvalConfig, EvalReport};
use crate::data::Corpus;
use crate::error::{Error, Result};
use crate::model::Model;
use crate::tensor::Tensor;
use crate::train::tokenize_captions;

const KS: [usize; 3] = [1, 5, 10];

/// 1-based rank of `target` in `row`: candidates scoring strictly higher,
/// plus equal-scoring candidates with a lower index, plus one.
pub fn rank_of(row: &[f64], target: usize) -> usize {
    let t = row[target];
    1 + row.iter().enumerate().filter(|&(j, &v)| v > t || (v == t && j < target)).count()
}

fn embed_all(
    cfg: &EvalConfig,
    n: usize,
    mut f: impl FnMut(std::ops::Range<usize>) -> Result<Tensor>,
) -> Result<Vec<Vec<f64>>> {
    let mut rows = Vec::with_capacity(n);
    let mut start = 0;
    while start < n {
        let end = (start + cfg.batch_size).min(n);
        let t = f(start..end)?;
        let width = t.shape()[1];
        rows.extend(t.data().chunks(width).map(<[f64]>::to_vec));
        start = end;
    }
    Ok(rows)
}

/// Text-to-video and video-to-text recall over the selected pairs. Every
/// caption and every clip is embedded once; ranking reuses the embeddings.
pub fn eval_retrieval(model: &Model, corpus: &Corpus, cfg: &EvalConfig, seed: u64) -> Result<EvalReport> {
    let indices = cfg.indices(corpus.len())?;
    let n = indices.len();
    if n < KS[KS.len() - 1] {
        return Err(Error::Validation(format!("retrieval needs at least {} pairs, got {n}", KS[KS.len() - 1])));
    }
    let ids = tokenize_captions(corpus, model)?;
    model.reset_embed_calls();
    let t0 = Instant::now();
    let text = embed_all(cfg, n, |r| {
        let batch: Vec<Vec<usize>> = indices[r].iter().map(|&i| ids[i].clone()).collect();
        model.embed_texts(&batch)
    })?;
    let video = embed_all(cfg, n, |r| {
        let batch: Vec<&[f32]> = indices[r].iter().map(|&i| corpus.clips[i].frames.as_slice()).collect();
        model.embed_videos(&batch)
    })?;
    let embed_seconds = t0.elapsed().as_secs_f64();
    let calls = model.embed_calls();
    if calls != 2 * n as u64 {
        return Err(Error::Validation(format!("{calls} unimodal embeddings for {n} pairs, expected {}", 2 * n)));
    }

    let t1 = Instant::now();
    // Rows are unit vectors, so the dot product is the cosine similarity.
    let sim: Vec<Vec<f64>> =
        text.iter().map(|t| video.iter().map(|v| t.iter().zip(v).map(|(a, b)| a * b).sum()).collect()).collect();
    let t2v: Vec<usize> = (0..n).map(|i| rank_of(&sim[i], i)).collect();
    let v2t: Vec<usize> = (0..n)
        .map(|j| {
            let col: Vec<f64> = (0..n).map(|i| sim[i][j]).collect();
            rank_of(&col, j)
        })
        .collect();
    let rank_seconds = t1.elapsed().as_secs_f64();

    let mut report = EvalReport::new("eval-retrieval", config_fingerprint(&model.config), seed);
    report.set("pairs", n as f64);
    report.set("embed_calls", calls as f64);
    for (dir, ranks) in [("t2v", &t2v), ("v2t", &v2t)] {
        for k in KS {
            let hits = ranks.iter().filter(|&&r| r <= k).count();
            report.set(&format!("{dir}_r@{k}"), hits as f64 / n as f64);
        }
        let mut r: Vec<f64> = ranks.iter().map(|&r| r as f64).collect();
        report.set(&format!("{dir}_median_rank"), median(&mut r));
    }
    report.time("embed_seconds", embed_seconds);
    report.time("rank_seconds", rank_seconds);
    report.validate()?;
    Ok(report)
}
