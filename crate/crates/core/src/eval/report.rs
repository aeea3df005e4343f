use std::fmt::Write as _;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::model::ModelConfig;

/// Outcome of one evaluation command.
///
/// Metrics and notes are deterministic; wall-clock numbers live in
/// `timings` and are written to a separate file so reruns compare equal.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct EvalReport {
    pub task: String,
    pub fingerprint: String,
    pub seed: u64,
    pub metrics: Vec<(String, f64)>,
    pub notes: Vec<String>,
    pub table: Option<Table>,
    pub timings: Vec<(String, f64)>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Table {
    pub header: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

impl Table {
    pub fn new(header: &[&str]) -> Self {
        Self { header: header.iter().map(|s| s.to_string()).collect(), rows: Vec::new() }
    }

    pub fn push(&mut self, row: Vec<String>) {
        self.rows.push(row);
    }

    pub fn to_csv(&self) -> String {
        let mut out = self.header.join(",");
        out.push('\n');
        for row in &self.rows {
            out.push_str(&row.join(","));
            out.push('\n');
        }
        out
    }
}

/// First 16 hex digits of the SHA-256 of the config's key=value text.
pub fn config_fingerprint(cfg: &ModelConfig) -> String {
    let digest = Sha256::digest(cfg.to_key_values().to_text().as_bytes());
    digest.iter().take(8).map(|b| format!("{b:02x}")).collect()
}

impl EvalReport {
    pub fn new(task: &str, fingerprint: String, seed: u64) -> Self {
        Self { task: task.into(), fingerprint, seed, ..Default::default() }
    }

    pub fn metric(&self, key: &str) -> Option<f64> {
        self.metrics.iter().find(|(k, _)| k == key).map(|(_, v)| *v)
    }

    pub fn set(&mut self, key: &str, value: f64) {
        match self.metrics.iter_mut().find(|(k, _)| k == key) {
            Some(slot) => slot.1 = value,
            None => self.metrics.push((key.into(), value)),
        }
    }

    pub fn time(&mut self, key: &str, seconds: f64) {
        self.timings.push((key.into(), seconds));
    }

    /// Checks ranges and the recall ordering of every metric present.
    pub fn validate(&self) -> Result<()> {
        for (k, v) in &self.metrics {
            if !v.is_finite() {
                return Err(Error::Validation(format!("metric {k} is {v}")));
            }
            let unit = k.contains("accuracy") || k.contains("r@");
            if unit && !(0.0..=1.0).contains(v) {
                return Err(Error::Validation(format!("metric {k} = {v} outside [0, 1]")));
            }
            if k.contains("median_rank") && *v < 1.0 {
                return Err(Error::Validation(format!("metric {k} = {v} below 1")));
            }
        }
        for dir in ["t2v", "v2t"] {
            let r: Vec<Option<f64>> = [1, 5, 10].iter().map(|k| self.metric(&format!("{dir}_r@{k}"))).collect();
            if let [Some(a), Some(b), Some(c)] = r[..] {
                if !(a <= b && b <= c) {
                    return Err(Error::Validation(format!("{dir} recalls not monotone: {a} {b} {c}")));
                }
            }
        }
        Ok(())
    }

    /// `key = value` lines: task, fingerprint, seed, metrics, then notes.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "task = {}", self.task);
        let _ = writeln!(out, "fingerprint = {}", self.fingerprint);
        let _ = writeln!(out, "seed = {}", self.seed);
        for (k, v) in &self.metrics {
            let _ = writeln!(out, "{k} = {v}");
        }
        for (i, n) in self.notes.iter().enumerate() {
            let _ = writeln!(out, "note.{i} = {n}");
        }
        out
    }

    pub fn timings_text(&self) -> String {
        self.timings.iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }

    /// Writes `<task>.txt`, `<task>.timing.txt` and, with a table, `<task>.csv`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let put = |name: String, text: String| {
            let path = dir.join(name);
            std::fs::write(&path, text).map_err(|e| Error::io(&path, e))
        };
        put(format!("{}.txt", self.task), self.to_text())?;
        put(format!("{}.timing.txt", self.task), self.timings_text())?;
        if let Some(t) = &self.table {
            put(format!("{}.csv", self.task), t.to_csv())?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn validation_catches_bad_recalls() {
        let mut r = EvalReport::new("retrieval", "x".into(), 0);
        r.set("t2v_r@1", 0.5);
        r.set("t2v_r@5", 0.4);
        r.set("t2v_r@10", 0.9);
        assert!(r.validate().is_err());
        r.set("t2v_r@5", 0.6);
        r.validate().unwrap();
        r.set("t2v_median_rank", 0.0);
        assert!(r.validate().is_err());
    }

    #[test]
    fn text_excludes_timings() {
        let mut r = EvalReport::new("mc", "f".into(), 3);
        r.set("accuracy", 0.25);
        r.time("seconds", 1.5);
        let text = r.to_text();
        assert!(text.contains("accuracy = 0.25") && !text.contains("seconds"));
    }
}
