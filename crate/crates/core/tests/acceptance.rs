//! Acceptance suite: one report line per criterion.
//!
//! Criteria 1, 2, 3, 8 and 9 check implementation correctness and fail the
//! test when they fail. Criteria 4 to 7 are empirical reproductions on the
//! desk corpus; their lines report PASS or FAIL with the measured numbers but
//! never abort the run, so a FAIL there is a finding, not a broken build.
//!
//! `TOKENROLL_ACCEPTANCE=4,5` restricts the run to the listed criteria.

mod common;

use std::collections::BTreeMap;
use std::io::Write;
use std::time::Instant;

use mimalloc::MiMalloc;

use common::{end_to_end_gradient_error, max_gradient_error, op_gradient_cases, random_tensor};
use tokenroll::data::{generate_corpus, read_corpus, write_corpus, ClipDims, Corpus, CorpusConfig};
use tokenroll::eval::{bench_flops, eval_cloze, eval_mc, eval_retrieval, BenchConfig, EvalConfig};
use tokenroll::model::{checkpoint_bytes, checkpoint_from_bytes, load_checkpoint, save_checkpoint, Model, ModelConfig};
use tokenroll::rng::SplitMix64;
use tokenroll::rolling::{attention_flops, roll_index_map, ttr, RollingConfig, Selection, TemporalMode};
use tokenroll::train::{finetune_retrieval, mlm_loss, pretrain, vtc_loss, vtm_loss, RetrievalObjective, TrainConfig};
use tokenroll::{Error, Tape, Tensor};

#[global_allocator]
static GLOBAL: MiMalloc = MiMalloc;

// Pilot-frozen desk training recipe.
const PRETRAIN_STEPS: usize = 700;
const PRETRAIN_LR: f64 = 2e-3;
const MASK_PROB: f64 = 0.5;
const FINETUNE_STEPS: usize = 300;
const FINETUNE_LR: f64 = 1e-3;
const SEEDS: [u64; 3] = [0, 1, 2];
const TRAIN_SEED: u64 = 1;
const TEST_SEED: u64 = 1001;

/// Writes straight to the process stderr so lines survive test capture.
fn say(line: &str) {
    let mut err = std::io::stderr();
    let _ = writeln!(err, "{line}");
}

struct Verdict {
    id: usize,
    pass: bool,
    hard: bool,
    detail: String,
}

impl Verdict {
    fn line(&self) -> String {
        let kind = if self.hard { "" } else { " (empirical)" };
        format!("criterion {}{kind}: {} | {}", self.id, if self.pass { "PASS" } else { "FAIL" }, self.detail)
    }
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

fn fmt_all(xs: &[f64]) -> String {
    xs.iter().map(|x| format!("{x:.3}")).collect::<Vec<_>>().join(",")
}

/// Trained models and corpora shared across criteria.
struct Lab {
    train: Corpus,
    test: Corpus,
    models: BTreeMap<(String, u64), Model>,
}

impl Lab {
    fn new() -> Self {
        let train = generate_corpus(&CorpusConfig::default(), TRAIN_SEED).unwrap();
        let test = generate_corpus(&CorpusConfig { count: 300, ..Default::default() }, TEST_SEED).unwrap();
        Self { train, test, models: BTreeMap::new() }
    }

    fn variant(name: &str) -> ModelConfig {
        let desk = ModelConfig::desk();
        let roll = |ratio, selection| RollingConfig { ratio, selection, ..RollingConfig::default() };
        match name {
            "rho0.25" => ModelConfig { rolling: roll(0.25, Selection::Block), ..desk },
            "rho0" => ModelConfig { rolling: roll(0.0, Selection::Block), ..desk },
            "random" => ModelConfig { rolling: roll(0.25, Selection::Random), ..desk },
            "varying" => ModelConfig { rolling: roll(0.25, Selection::Varying), ..desk },
            "no-pos" => ModelConfig { use_pos_embed: false, ..desk },
            "no-type" => ModelConfig { use_type_embed: false, ..desk },
            _ => unreachable!("{name}"),
        }
    }

    fn pretrained(&mut self, name: &str, seed: u64) -> &Model {
        let key = (name.to_string(), seed);
        if !self.models.contains_key(&key) {
            let t = Instant::now();
            let cfg = TrainConfig {
                total_steps: PRETRAIN_STEPS,
                base_lr: PRETRAIN_LR,
                mask_prob: MASK_PROB,
                seed,
                log_every: 100,
                single_precision: true,
                ..Default::default()
            };
            let idx: Vec<usize> = (0..self.train.len()).collect();
            let model = Model::new(Self::variant(name), seed).unwrap();
            let out = pretrain(model, &self.train, &idx, &cfg, None).unwrap();
            let last = out.metrics.last().unwrap();
            say(&format!(
                "  pretrained {name} seed {seed}: {:.0}s, final vtm acc {:.3}, mlm acc {:.3}",
                t.elapsed().as_secs_f64(),
                last.vtm_acc.unwrap_or(f64::NAN),
                last.mlm_acc.unwrap_or(f64::NAN)
            ));
            self.models.insert(key.clone(), out.model);
        }
        &self.models[&key]
    }

    fn mc_direction(&mut self, name: &str, seed: u64) -> f64 {
        let test = self.test.clone();
        let model = self.pretrained(name, seed);
        eval_mc(model, &test, &EvalConfig::default(), 0).unwrap().metric("direction_accuracy").unwrap()
    }

    fn cloze(&mut self, name: &str, seed: u64) -> (f64, f64, f64) {
        let test = self.test.clone();
        let model = self.pretrained(name, seed);
        let r = eval_cloze(model, &test, &EvalConfig { export_items: 0, ..Default::default() }, 0).unwrap();
        let m = |k: &str| r.metric(k).unwrap();
        (m("color_accuracy"), m("shape_accuracy"), m("direction_accuracy"))
    }
}

fn criterion_1() -> Verdict {
    let t = Instant::now();
    let mut worst_op = ("", 0.0f64);
    for (name, case) in op_gradient_cases() {
        let worst = (0..100u64).map(case).fold(0.0, f64::max);
        if worst >= worst_op.1 {
            worst_op = (name, worst);
        }
    }
    let mut rng = SplitMix64::new(7);
    let x = random_tensor(&[3, 4], &mut rng);
    let w = random_tensor(&[4, 5], &mut rng);
    let composite = max_gradient_error(&[x, w], |_, v| v[0].matmul(v[1])?.gelu()?.reshape(&[15])?.mean_axis(0));
    let cfg = ModelConfig {
        dim: 16,
        heads: 2,
        layers: 2,
        height: 16,
        width: 16,
        max_text: 6,
        vtc_dim: 8,
        qa_answers: 4,
        ..ModelConfig::desk()
    };
    let e2e = end_to_end_gradient_error(&cfg, 19, 20);
    let secs = t.elapsed().as_secs_f64();
    let pass = worst_op.1 < 1e-4 && composite < 1e-4 && e2e < 1e-3 && secs < 120.0;
    Verdict {
        id: 1,
        pass,
        hard: true,
        detail: format!(
            "{} ops x 100 seeds, worst {} {:.2e}; composite {composite:.2e}; 20-param probe {e2e:.2e}; {secs:.1}s",
            op_gradient_cases().len(),
            worst_op.0,
            worst_op.1
        ),
    }
}

fn criterion_2() -> Verdict {
    let t = Instant::now();
    let mut failures = Vec::new();
    let mut cases = 0;
    let mut rng = SplitMix64::new(2);
    for frames in 1..=5usize {
        for n in [1usize, 4, 9, 16, 49] {
            for ratio in [0.0, 0.1, 0.25, 0.5, 0.75] {
                for selection in [Selection::Block, Selection::Random, Selection::Varying] {
                    cases += 1;
                    let k = RollingConfig::with_ratio(ratio).rolled_count(n);
                    let cfg = RollingConfig { ratio, selection, start_layer: 1, block_offset: (n - k) / 2 };
                    let layer = 1 + rng.index(4);
                    let seed = rng.next_u64();
                    let map = roll_index_map(frames, n, &cfg, layer, Some(&mut SplitMix64::new(seed))).unwrap();
                    let mut sorted = map.clone();
                    sorted.sort_unstable();
                    if sorted != (0..frames * n).collect::<Vec<_>>() {
                        failures.push(format!("bijection S={frames} n={n} ratio={ratio}"));
                    }
                    if ratio == 0.0 && map != (0..frames * n).collect::<Vec<_>>() {
                        failures.push(format!("identity S={frames} n={n}"));
                    }

                    let x = Tensor::from_fn(&[frames, n, 3], |_| rng.next_f64());
                    let tape = Tape::new();
                    let xv = tape.leaf(x.clone());
                    let y = ttr(xv, &cfg, layer, Some(&mut SplitMix64::new(seed))).unwrap();
                    let mut a: Vec<u64> = y.value().data().iter().map(|v| v.to_bits()).collect();
                    let mut b: Vec<u64> = x.data().iter().map(|v| v.to_bits()).collect();
                    a.sort_unstable();
                    b.sort_unstable();
                    if a != b {
                        failures.push(format!("multiset S={frames} n={n} ratio={ratio}"));
                    }

                    let up = Tensor::from_fn(&[frames * n * 3, 1], |_| rng.next_f64());
                    let loss = y.reshape(&[1, frames * n * 3]).unwrap().matmul(tape.constant(up.clone())).unwrap();
                    let g = tape.backward(loss.sum().unwrap()).unwrap();
                    let mut expected = vec![0.0; frames * n * 3];
                    for (dst, &src) in map.iter().enumerate() {
                        expected[src * 3..src * 3 + 3].copy_from_slice(&up.data()[dst * 3..dst * 3 + 3]);
                    }
                    if g.wrt(xv).data() != &expected[..] {
                        failures.push(format!("gradient S={frames} n={n} ratio={ratio}"));
                    }

                    if selection == Selection::Block && frames > 1 && k > 0 {
                        let mut z = tape.constant(x.clone());
                        for step in 1..=frames {
                            z = ttr(z, &cfg, layer, None).unwrap();
                            if (step < frames) == (*z.value() == x) {
                                failures.push(format!("order S={frames} n={n} ratio={ratio} step {step}"));
                            }
                        }
                    }
                }
            }
        }
    }
    let secs = t.elapsed().as_secs_f64();
    failures.truncate(5);
    Verdict {
        id: 2,
        pass: failures.is_empty() && secs < 10.0,
        hard: true,
        detail: format!("{cases} configurations, failures {failures:?}, {secs:.2}s"),
    }
}

fn criterion_3() -> Verdict {
    let rolling = attention_flops(3, 16, 196, TemporalMode::Rolling);
    let flatten = attention_flops(3, 16, 196, TemporalMode::Flatten);
    let (report, walls) = bench_flops(&BenchConfig::default(), 0).unwrap();
    let mismatches = report.metric("count_mismatches").unwrap();
    let checks = report.metric("count_checks").unwrap();
    let mut wall_ok = true;
    let mut walls_text = Vec::new();
    for s in [2, 3, 4] {
        let get = |mode| walls.iter().find(|w| w.frames == s && w.mode == mode).map(|w| w.median_seconds);
        match (get(TemporalMode::Rolling), get(TemporalMode::Flatten)) {
            (Some(r), Some(f)) => {
                wall_ok &= r <= f;
                walls_text.push(format!("S={s} {:.1}ms vs {:.1}ms", r * 1e3, f * 1e3));
            }
            _ => wall_ok = false,
        }
    }
    let pass = rolling == 134_832 && flatten == 364_816 && mismatches == 0.0 && checks > 0.0 && wall_ok;
    Verdict {
        id: 3,
        pass,
        hard: true,
        detail: format!(
            "{checks} count checks, {mismatches} mismatches; S=3 m=16 n=196: flatten {flatten} / rolling {rolling} = {:.4}; \
             rolling vs flatten median forward: {}",
            flatten as f64 / rolling as f64,
            walls_text.join(", ")
        ),
    }
}

fn criterion_4(lab: &mut Lab) -> Verdict {
    let t = Instant::now();
    let mut rolled = Vec::new();
    let mut still = Vec::new();
    for seed in SEEDS {
        rolled.push(lab.mc_direction("rho0.25", seed));
        still.push(lab.mc_direction("rho0", seed));
    }
    let secs = t.elapsed().as_secs_f64();
    let margin = 100.0 * (mean(&rolled) - mean(&still));
    Verdict {
        id: 4,
        pass: margin >= 5.0 && secs < 1800.0,
        hard: false,
        detail: format!(
            "direction-contrast MC accuracy rho=0.25 [{}] mean {:.3}, rho=0 [{}] mean {:.3}, margin {margin:+.1} points \
             (need >= +5); {secs:.0}s (limit 1800s)",
            fmt_all(&rolled),
            mean(&rolled),
            fmt_all(&still),
            mean(&still)
        ),
    }
}

fn criterion_5(lab: &mut Lab) -> Verdict {
    let mut rolled = Vec::new();
    let mut still = Vec::new();
    for seed in SEEDS {
        rolled.push(lab.cloze("rho0.25", seed).2);
        still.push(lab.cloze("rho0", seed).2);
    }
    let (r, s) = (mean(&rolled), mean(&still));
    let still_ok = (s - 0.25).abs() <= 0.10;
    let rolled_ok = r - 0.25 >= 0.30;
    Verdict {
        id: 5,
        pass: still_ok && rolled_ok,
        hard: false,
        detail: format!(
            "direction cloze rho=0 [{}] mean {s:.3} (need 0.15..0.35: {}), rho=0.25 [{}] mean {r:.3} (need >= 0.55: {})",
            fmt_all(&still),
            if still_ok { "ok" } else { "no" },
            fmt_all(&rolled),
            if rolled_ok { "ok" } else { "no" }
        ),
    }
}

fn criterion_6(lab: &mut Lab) -> Verdict {
    let t = Instant::now();
    let mut by_selection = Vec::new();
    for name in ["rho0.25", "random", "varying"] {
        let accs: Vec<f64> = SEEDS.iter().map(|&s| lab.mc_direction(name, s)).collect();
        by_selection.push((name, mean(&accs), accs));
    }
    let (block, random, varying) = (by_selection[0].1, by_selection[1].1, by_selection[2].1);
    let ordering = block >= random && random >= varying;

    let slot_mean = |c: (f64, f64, f64)| (c.0 + c.1 + c.2) / 3.0;
    let full = slot_mean(lab.cloze("rho0.25", 0));
    let no_pos = slot_mean(lab.cloze("no-pos", 0));
    let no_type = slot_mean(lab.cloze("no-type", 0));
    let secs = t.elapsed().as_secs_f64();
    // Runs shared with criterion 4 are already trained; count what this one adds.
    Verdict {
        id: 6,
        pass: secs < 3600.0,
        hard: false,
        detail: format!(
            "direction MC block {block:.3} [{}], random {random:.3} [{}], varying {varying:.3} [{}]; \
             block >= random >= varying {} (reported only); mean slot cloze full {full:.3}, no position {no_pos:.3} \
             ({:+.1} points), no type {no_type:.3} ({:+.1} points); {secs:.0}s (limit 3600s)",
            fmt_all(&by_selection[0].2),
            fmt_all(&by_selection[1].2),
            fmt_all(&by_selection[2].2),
            if ordering { "holds" } else { "does not hold" },
            100.0 * (no_pos - full),
            100.0 * (no_type - full)
        ),
    }
}

fn criterion_7(lab: &mut Lab) -> Verdict {
    let t = Instant::now();
    let train_idx: Vec<usize> = (0..1000).collect();
    let eval_cfg = EvalConfig { eval_count: 100, ..Default::default() };
    let objectives = [RetrievalObjective::Vtm, RetrievalObjective::Vtc, RetrievalObjective::Both];
    let mut r1: BTreeMap<&str, Vec<f64>> = BTreeMap::new();
    let mut r10: BTreeMap<&str, Vec<f64>> = BTreeMap::new();
    let mut calls_ok = true;
    for seed in SEEDS {
        let base = lab.pretrained("rho0.25", seed).clone();
        for objective in objectives {
            let cfg = TrainConfig {
                total_steps: FINETUNE_STEPS,
                base_lr: FINETUNE_LR,
                seed,
                log_every: 100,
                single_precision: true,
                ..Default::default()
            };
            let out = finetune_retrieval(base.clone(), &lab.train, &train_idx, &cfg, objective, None).unwrap();
            let report = eval_retrieval(&out.model, &lab.test, &eval_cfg, 0).unwrap();
            calls_ok &= report.metric("embed_calls") == Some(200.0) && out.model.embed_calls() == 200;
            r1.entry(objective.name()).or_default().push(report.metric("t2v_r@1").unwrap());
            r10.entry(objective.name()).or_default().push(report.metric("t2v_r@10").unwrap());
        }
    }
    let secs = t.elapsed().as_secs_f64();
    let both_r1 = mean(&r1["both"]);
    let combo = mean(&r10["both"]) >= mean(&r10["vtm"]).max(mean(&r10["vtc"]));
    let summary: Vec<String> = objectives
        .iter()
        .map(|o| {
            let n = o.name();
            format!("{n} R@1 [{}] R@10 [{}]", fmt_all(&r1[n]), fmt_all(&r10[n]))
        })
        .collect();
    Verdict {
        id: 7,
        pass: both_r1 >= 0.10 && combo && calls_ok,
        hard: false,
        detail: format!(
            "text-to-video on 100 held-out pairs after 1000-pair fine-tuning: {}; vtm+vtc mean R@1 {both_r1:.3} \
             (need >= 0.10), R@10 vtm+vtc >= max(single) {}; 2N embed calls {}; {secs:.0}s",
            summary.join("; "),
            if combo { "holds" } else { "does not hold" },
            if calls_ok { "exact" } else { "wrong" }
        ),
    }
}

fn criterion_8() -> Verdict {
    let mut problems = Vec::new();
    let dims = ClipDims { height: 16, width: 16, ..ClipDims::DESK };
    let corpus_cfg = CorpusConfig { count: 24, dims, min_speed: 1, max_speed: 3 };
    let corpus = generate_corpus(&corpus_cfg, 4).unwrap();
    if generate_corpus(&corpus_cfg, 4).unwrap() != corpus {
        problems.push("corpus generation");
    }
    let cfg = ModelConfig {
        dim: 16,
        heads: 2,
        layers: 2,
        height: 16,
        width: 16,
        max_text: 6,
        vtc_dim: 8,
        qa_answers: 4,
        ..ModelConfig::desk()
    };
    let idx: Vec<usize> = (0..corpus.len()).collect();
    let tcfg = TrainConfig { total_steps: 6, batch_size: 8, base_lr: 1e-3, log_every: 1, seed: 3, ..Default::default() };
    let run = || pretrain(Model::new(cfg.clone(), 3).unwrap(), &corpus, &idx, &tcfg, None).unwrap();
    let (a, b) = (run(), run());
    if checkpoint_bytes(&a.model) != checkpoint_bytes(&b.model) || a.metrics != b.metrics {
        problems.push("training");
    }
    let eval = EvalConfig::default();
    if eval_mc(&a.model, &corpus, &eval, 1).unwrap().to_text() != eval_mc(&b.model, &corpus, &eval, 1).unwrap().to_text()
    {
        problems.push("reports");
    }

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.ckpt");
    save_checkpoint(&path, &a.model).unwrap();
    let bytes = std::fs::read(&path).unwrap();
    let loaded = load_checkpoint(&path).unwrap();
    if bytes != checkpoint_bytes(&a.model) || checkpoint_bytes(&loaded) != bytes {
        problems.push("checkpoint round trip");
    }
    let mut flipped = bytes.clone();
    let mid = flipped.len() / 2;
    flipped[mid] ^= 0x10;
    if !matches!(checkpoint_from_bytes(&flipped), Err(Error::Checkpoint(ref m)) if m.contains("CRC")) {
        problems.push("checkpoint CRC");
    }

    let cdir = dir.path().join("corpus");
    write_corpus(&cdir, &corpus).unwrap();
    let back = read_corpus(&cdir).unwrap();
    let cdir2 = dir.path().join("corpus2");
    write_corpus(&cdir2, &back).unwrap();
    let same_files = ["manifest", "vocab.txt", "clips.bin", "captions.jsonl"]
        .iter()
        .all(|f| std::fs::read(cdir.join(f)).ok() == std::fs::read(cdir2.join(f)).ok());
    if back != corpus || !same_files {
        problems.push("corpus round trip");
    }
    Verdict {
        id: 8,
        pass: problems.is_empty(),
        hard: true,
        detail: if problems.is_empty() {
            "bitwise-identical checkpoints, metric logs and reports; checkpoint, CRC and corpus round trips exact".into()
        } else {
            format!("failed: {problems:?}")
        },
    }
}

fn criterion_9() -> Verdict {
    let tape = Tape::new();
    let vtm = vtm_loss(tape.constant(Tensor::zeros(&[8, 2])), &[0, 1, 0, 1, 1, 1, 0, 0]).unwrap().value().item();
    let labels: Vec<Vec<(usize, usize)>> = (0..4).map(|b| vec![(1 + b, 3 * b), (0, 39)]).collect();
    let mlm = mlm_loss(tape.constant(Tensor::zeros(&[4, 6, 40])), &labels).unwrap().value().item();
    let eye = tape.constant(Tensor::eye(2));
    let vtc = vtc_loss(eye, eye, 1.0).unwrap().value().item();
    let errs = [(vtm - 2f64.ln()).abs(), (mlm - 40f64.ln()).abs(), (vtc - (1.0 + (-1f64).exp()).ln()).abs()];
    Verdict {
        id: 9,
        pass: errs.iter().all(|e| *e < 1e-9) && (vtc - 0.31326).abs() < 1e-5,
        hard: true,
        detail: format!("vtm {vtm:.12} (ln 2), mlm {mlm:.12} (ln 40), vtc {vtc:.12} (ln(1+1/e)); max error {:.1e}", {
            errs.iter().fold(0.0f64, |a, &b| a.max(b))
        }),
    }
}

#[test]
fn acceptance_criteria() {
    let only: Option<Vec<usize>> = std::env::var("TOKENROLL_ACCEPTANCE")
        .ok()
        .map(|v| v.split(',').filter_map(|s| s.trim().parse().ok()).collect());
    let wanted = |id: usize| only.as_ref().is_none_or(|ids| ids.contains(&id));
    let mut lab: Option<Lab> = None;
    let mut verdicts = Vec::new();
    for id in 1..=9 {
        if !wanted(id) {
            continue;
        }
        say(&format!("criterion {id}: running"));
        let t = Instant::now();
        let verdict = match id {
            1 => criterion_1(),
            2 => criterion_2(),
            3 => criterion_3(),
            8 => criterion_8(),
            9 => criterion_9(),
            _ => {
                let lab = lab.get_or_insert_with(Lab::new);
                match id {
                    4 => criterion_4(lab),
                    5 => criterion_5(lab),
                    6 => criterion_6(lab),
                    _ => criterion_7(lab),
                }
            }
        };
        say(&format!("{} [{:.0}s]", verdict.line(), t.elapsed().as_secs_f64()));
        verdicts.push(verdict);
    }
    say("acceptance summary:");
    for v in &verdicts {
        say(&format!("  {}", v.line()));
    }
    let broken: Vec<usize> = verdicts.iter().filter(|v| v.hard && !v.pass).map(|v| v.id).collect();
    assert!(broken.is_empty(), "correctness criteria failed: {broken:?}");
}
