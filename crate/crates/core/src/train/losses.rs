use crate::error::{Error, Result};
use crate::tensor::Var;

/// Mean cross-entropy of `[B, 2]` matching logits.
pub fn vtm_loss<'t>(logits: Var<'t>, labels: &[usize]) -> Result<Var<'t>> {
    if let Some(bad) = labels.iter().find(|&&l| l > 1) {
        return Err(Error::Contract(format!("matching label {bad} not in {{0, 1}}")));
    }
    logits.cross_entropy(labels)
}

/// Mean cross-entropy over masked positions only. `logits` is
/// `[B, m, |V|]`; `labels[b]` lists `(position, original id)` pairs.
pub fn mlm_loss<'t>(logits: Var<'t>, labels: &[Vec<(usize, usize)>]) -> Result<Var<'t>> {
    let shape = logits.shape();
    if shape.len() != 3 || shape[0] != labels.len() {
        return Err(Error::shape("mlm_loss", format!("logits {shape:?} for {} label lists", labels.len())));
    }
    let (m, v) = (shape[1], shape[2]);
    let mut rows = Vec::new();
    let mut targets = Vec::new();
    for (b, sample) in labels.iter().enumerate() {
        if sample.is_empty() {
            return Err(Error::Contract(format!("sample {b} has no masked position")));
        }
        for &(pos, id) in sample {
            if pos >= m || id >= v {
                return Err(Error::Contract(format!("label ({pos}, {id}) outside logits {shape:?}")));
            }
            rows.push(b * m + pos);
            targets.push(id);
        }
    }
    logits.reshape(&[shape[0] * m, v])?.gather_rows(&rows)?.cross_entropy(&targets)
}

/// Symmetric contrastive loss over `[B, D]` unit rows with diagonal targets.
pub fn vtc_loss<'t>(video: Var<'t>, text: Var<'t>, temperature: f64) -> Result<Var<'t>> {
    let (vs, ts) = (video.shape(), text.shape());
    if vs.len() != 2 || vs != ts {
        return Err(Error::shape("vtc_loss", format!("{vs:?} vs {ts:?}")));
    }
    let b = vs[0];
    if b < 2 {
        return Err(Error::Contract(format!("contrastive loss needs a batch of at least 2, got {b}")));
    }
    for (name, x) in [("video", video), ("text", text)] {
        for (i, row) in x.value().data().chunks(vs[1]).enumerate() {
            let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            if (norm - 1.0).abs() > 1e-6 {
                return Err(Error::Contract(format!("{name} row {i} has norm {norm}, expected 1")));
            }
        }
    }
    let targets: Vec<usize> = (0..b).collect();
    let sim = video.matmul(text.transpose()?)?.scale(1.0 / temperature)?;
    let v2t = sim.cross_entropy(&targets)?;
    let t2v = sim.transpose()?.cross_entropy(&targets)?;
    v2t.add(t2v)?.scale(0.5)
}

/// Fraction of rows whose argmax equals the target.
pub fn argmax_accuracy(scores: &[f64], width: usize, targets: &[usize]) -> f64 {
    if targets.is_empty() {
        return 0.0;
    }
    let hits = scores.chunks(width).zip(targets).filter(|(row, &t)| argmax(row) == t).count();
    hits as f64 / targets.len() as f64
}

/// First index of the maximum.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}
