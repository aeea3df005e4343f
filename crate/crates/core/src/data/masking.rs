use super::vocab::{Vocabulary, MASK};
use crate::rng::SplitMix64;

/// Token ids with some positions replaced by `[MASK]`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MaskedText {
    pub ids: Vec<usize>,
    /// `(position, original id)` for every masked position, in order.
    pub labels: Vec<(usize, usize)>,
}

/// Masks each non-special token independently with probability `p`.
///
/// With `force_one`, a draw that masks nothing is discarded and redrawn, so
/// every sample carries at least one label whenever it has a maskable token
/// and `p > 0`.
pub fn mask_tokens(ids: &[usize], p: f64, rng: &mut SplitMix64, force_one: bool) -> MaskedText {
    let maskable = ids.iter().any(|&i| !Vocabulary::is_special(i));
    loop {
        let mut out = ids.to_vec();
        let mut labels = Vec::new();
        for (pos, &id) in ids.iter().enumerate() {
            if !Vocabulary::is_special(id) && rng.bernoulli(p) {
                out[pos] = MASK;
                labels.push((pos, id));
            }
        }
        if !labels.is_empty() || !force_one || !maskable || p <= 0.0 {
            return MaskedText { ids: out, labels };
        }
    }
}

/// Replaces exactly the given positions by `[MASK]`.
pub fn mask_positions(ids: &[usize], positions: &[usize]) -> MaskedText {
    let mut out = ids.to_vec();
    let labels = positions
        .iter()
        .map(|&p| {
            out[p] = MASK;
            (p, ids[p])
        })
        .collect();
    MaskedText { ids: out, labels }
}
