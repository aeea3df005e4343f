//! Evaluation protocols over a frozen checkpoint: multiple choice by the
//! matching head, unimodal retrieval, masked-word cloze, text-to-patch
//! attention analysis, and the attention cost benchmark.

mod attn;
mod bench;
mod cloze;
mod mc;
mod report;
mod retrieval;

pub use attn::{attention_distribution, SlotMass};
pub use bench::{bench_flops, BenchConfig, WallClock};
pub use cloze::{eval_cloze, slot_position, Slot};
pub use mc::{build_mc_items, eval_mc, mc_scores, McItem};
pub use report::{config_fingerprint, EvalReport, Table};
pub use retrieval::{eval_retrieval, rank_of};

use crate::config::KeyValues;
use crate::data::Corpus;
use crate::error::{Error, Result};

/// Settings shared by the evaluation commands.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalConfig {
    /// Items per forward pass.
    pub batch_size: usize,
    /// First record of the corpus to evaluate.
    pub eval_start: usize,
    /// Records to evaluate; 0 means all from `eval_start` on.
    pub eval_count: usize,
    /// Items whose patch similarities the cloze command exports.
    pub export_items: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { batch_size: 32, eval_start: 0, eval_count: 0, export_items: 20 }
    }
}

impl EvalConfig {
    pub fn apply(&mut self, kv: &mut KeyValues) -> Result<()> {
        kv.take_into("eval_batch_size", &mut self.batch_size)?;
        kv.take_into("eval_start", &mut self.eval_start)?;
        kv.take_into("eval_count", &mut self.eval_count)?;
        kv.take_into("export_items", &mut self.export_items)?;
        if self.batch_size == 0 {
            return Err(Error::Config("eval_batch_size must be positive".into()));
        }
        Ok(())
    }

    /// Record indices selected from a corpus of `len` records.
    pub fn indices(&self, len: usize) -> Result<Vec<usize>> {
        let end = if self.eval_count == 0 { len } else { self.eval_start + self.eval_count };
        if end > len || self.eval_start > end {
            return Err(Error::Validation(format!(
                "eval range {}..{end} outside corpus of {len} records",
                self.eval_start
            )));
        }
        Ok((self.eval_start..end).collect())
    }
}

fn check_indices(corpus: &Corpus, indices: &[usize]) -> Result<()> {
    match indices.iter().find(|&&i| i >= corpus.len()) {
        Some(i) => Err(Error::Validation(format!("record {i} outside corpus of {}", corpus.len()))),
        None => Ok(()),
    }
}

fn median(values: &mut [f64]) -> f64 {
    values.sort_by(|a, b| a.total_cmp(b));
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}
