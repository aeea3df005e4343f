use std::time::Instant;

use super::{median, EvalReport, Table};
use crate::config::KeyValues;
use crate::error::{Error, Result};
use crate::model::{ForwardState, Model, ModelConfig};
use crate::rng::SplitMix64;
use crate::rolling::{attention_flops, TemporalMode};
use crate::tensor::Tape;

const MODES: [TemporalMode; 3] = [TemporalMode::Rolling, TemporalMode::Flatten, TemporalMode::ChannelShift];

/// Sweep for the count check and settings for the timing runs.
#[derive(Clone, Debug, PartialEq)]
pub struct BenchConfig {
    pub frames: Vec<usize>,
    pub text: Vec<usize>,
    /// Patches per frame; each must be a perfect square.
    pub patches: Vec<usize>,
    pub dims: Vec<usize>,
    pub heads: usize,
    pub layers: usize,
    pub reps: usize,
    pub wall_frames: Vec<usize>,
    pub wall_text: usize,
    pub wall_patches: usize,
    pub wall_dim: usize,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            frames: vec![1, 2, 3, 4],
            text: vec![8, 16],
            patches: vec![16, 49],
            dims: vec![32, 64],
            heads: 4,
            layers: 2,
            reps: 20,
            wall_frames: vec![2, 3, 4],
            wall_text: 16,
            wall_patches: 196,
            wall_dim: 64,
        }
    }
}

fn parse_list(text: &str, key: &str) -> Result<Vec<usize>> {
    text.split(',')
        .map(|s| s.trim().parse::<usize>().map_err(|e| Error::Config(format!("{key}: {s:?}: {e}"))))
        .collect()
}

impl BenchConfig {
    pub fn apply(&mut self, kv: &mut KeyValues) -> Result<()> {
        for (key, slot) in [
            ("bench_frames", &mut self.frames),
            ("bench_text", &mut self.text),
            ("bench_patches", &mut self.patches),
            ("bench_dims", &mut self.dims),
            ("bench_wall_frames", &mut self.wall_frames),
        ] {
            if let Some(s) = kv.take::<String>(key)? {
                *slot = parse_list(&s, key)?;
            }
        }
        kv.take_into("bench_heads", &mut self.heads)?;
        kv.take_into("bench_layers", &mut self.layers)?;
        kv.take_into("bench_reps", &mut self.reps)?;
        kv.take_into("bench_wall_text", &mut self.wall_text)?;
        kv.take_into("bench_wall_patches", &mut self.wall_patches)?;
        kv.take_into("bench_wall_dim", &mut self.wall_dim)?;
        Ok(())
    }
}

/// Wall-clock median of one forward pass.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct WallClock {
    pub frames: usize,
    pub mode: TemporalMode,
    pub median_seconds: f64,
}

fn bench_model(
    s: usize,
    m: usize,
    n: usize,
    d: usize,
    heads: usize,
    layers: usize,
    mode: TemporalMode,
    patch: usize,
) -> Result<Model> {
    let grid = (n as f64).sqrt().round() as usize;
    if grid * grid != n || n == 0 {
        return Err(Error::Validation(format!("{n} patches per frame is not a square grid")));
    }
    if s == 0 || m == 0 || d == 0 || heads == 0 || d % heads != 0 {
        return Err(Error::Validation(format!("bench dims S={s} m={m} D={d} heads={heads}")));
    }
    let cfg = ModelConfig {
        dim: d,
        heads,
        layers,
        frames: s,
        max_text: m,
        patch,
        height: grid * patch,
        width: grid * patch,
        temporal: mode,
        ..ModelConfig::desk()
    };
    Model::new(cfg, 0)
}

fn inputs(model: &Model) -> (Vec<f32>, Vec<usize>) {
    let c = &model.config;
    let mut rng = SplitMix64::stream(0, "bench-inputs");
    let clip = (0..c.frames * c.channels * c.height * c.width).map(|_| rng.next_f64() as f32).collect();
    let ids = (0..c.max_text).map(|i| if i == 0 { 1 } else { 4 + i % 15 }).collect();
    (clip, ids)
}

fn forward(model: &Model, clip: &[f32], ids: &[usize]) -> Result<u64> {
    let tape = Tape::new();
    let p = model.params.bind(&tape, false);
    let mut st = ForwardState::eval(0);
    model.forward_multimodal(&p, &[clip], &[ids.to_vec()], &mut st)?;
    Ok(st.score_entries)
}

/// Analytic against instrumented attention score entries over the sweep,
/// plus forward wall-clock medians. Timings go to the report's timing
/// section and the returned rows, never to its metrics.
pub fn bench_flops(cfg: &BenchConfig, seed: u64) -> Result<(EvalReport, Vec<WallClock>)> {
    let mut table =
        Table::new(&["frames", "text", "patches", "dim", "mode", "formula", "analytic", "instrumented", "match"]);
    let (mut checks, mut mismatches) = (0usize, 0usize);
    for &s in &cfg.frames {
        for &m in &cfg.text {
            for &n in &cfg.patches {
                for &d in &cfg.dims {
                    for mode in MODES {
                        let model = bench_model(s, m, n, d, cfg.heads, cfg.layers, mode, 4)?;
                        let (clip, ids) = inputs(&model);
                        let measured = forward(&model, &clip, &ids)?;
                        // Sequences carry one class token per modality block.
                        let per_head = attention_flops(s as u64, m as u64 + 1, n as u64 + 1, mode);
                        let analytic = per_head * (cfg.heads * cfg.layers) as u64;
                        checks += 1;
                        mismatches += usize::from(analytic != measured);
                        table.push(vec![
                            s.to_string(),
                            m.to_string(),
                            n.to_string(),
                            d.to_string(),
                            mode.name().into(),
                            attention_flops(s as u64, m as u64, n as u64, mode).to_string(),
                            analytic.to_string(),
                            measured.to_string(),
                            u8::from(analytic == measured).to_string(),
                        ]);
                    }
                }
            }
        }
    }

    let mut report = EvalReport::new("bench-flops", String::from("sweep"), seed);
    report.set("count_checks", checks as f64);
    report.set("count_mismatches", mismatches as f64);
    let roll = attention_flops(3, 16, 196, TemporalMode::Rolling);
    let flat = attention_flops(3, 16, 196, TemporalMode::Flatten);
    report.set("rolling_entries_s3_m16_n196", roll as f64);
    report.set("flatten_entries_s3_m16_n196", flat as f64);
    report.set("flatten_over_rolling_s3_m16_n196", flat as f64 / roll as f64);
    report.table = Some(table);

    let mut walls = Vec::new();
    for &s in &cfg.wall_frames {
        for mode in MODES {
            let model = bench_model(
                s,
                cfg.wall_text,
                cfg.wall_patches,
                cfg.wall_dim,
                cfg.heads,
                ModelConfig::desk().layers,
                mode,
                16,
            )?;
            let (clip, ids) = inputs(&model);
            forward(&model, &clip, &ids)?;
            let mut times = Vec::with_capacity(cfg.reps);
            for _ in 0..cfg.reps.max(1) {
                let t = Instant::now();
                forward(&model, &clip, &ids)?;
                times.push(t.elapsed().as_secs_f64());
            }
            let med = median(&mut times);
            report.time(&format!("forward_median_seconds_s{s}_{}", mode.name()), med);
            walls.push(WallClock { frames: s, mode, median_seconds: med });
        }
    }
    report.validate()?;
    if mismatches > 0 {
        return Err(Error::Validation(format!(
            "{mismatches} of {checks} analytic counts differ from the instrumented counts"
        )));
    }
    Ok((report, walls))
}
