//! `tokenroll` command-line driver.
//!
//! Every command reads an optional flat `key = value` config, takes its
//! randomness from `--seed`, and writes its artifacts under `--out`.
//! Failures print one `error[<kind>]: <message>` line to stderr and exit 1.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use mimalloc::MiMalloc;

use tokenroll::config::KeyValues;
use tokenroll::data::{generate_corpus, read_corpus, write_corpus, Corpus, CorpusConfig};
use tokenroll::eval::{
    attention_distribution, bench_flops, eval_cloze, eval_mc, eval_retrieval, BenchConfig, EvalConfig, EvalReport,
};
use tokenroll::model::{load_checkpoint, Model, ModelConfig};
use tokenroll::train::{finetune_retrieval, pretrain, RetrievalObjective, TrainConfig};
use tokenroll::{Error, Result};

#[global_allocator]
static GLOBAL: MiMalloc = MiMalloc;

#[derive(Parser)]
#[command(name = "tokenroll", version, about = "Video-language transformer with temporal token rolling")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// Flat `key = value` config file.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a moving-shapes corpus directory.
    GenCorpus(Common),
    /// Pretrain with matching and masked-word objectives.
    Pretrain {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        corpus: PathBuf,
    },
    /// Fine-tune a checkpoint for retrieval.
    FinetuneRetrieval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        /// vtm, vtc or both.
        #[arg(long, default_value = "both")]
        objective: String,
    },
    /// Multiple choice by the matching head.
    EvalMc(EvalArgs),
    /// Text-to-video and video-to-text retrieval.
    EvalRetrieval(EvalArgs),
    /// Masked slot-word prediction with patch similarity export.
    EvalCloze(EvalArgs),
    /// Text-to-patch attention mass of a rolling and a baseline checkpoint.
    AttnDist {
        #[command(flatten)]
        eval: EvalArgs,
        #[arg(long)]
        baseline_checkpoint: Option<PathBuf>,
    },
    /// Attention score-entry counts and forward wall-clock per temporal mode.
    BenchFlops(Common),
}

#[derive(Args, Clone)]
struct EvalArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long)]
    checkpoint: Option<PathBuf>,
}

fn load_config(path: Option<&Path>) -> Result<KeyValues> {
    match path {
        Some(p) => KeyValues::load(p),
        None => Ok(KeyValues::default()),
    }
}

fn corpus_config(kv: &mut KeyValues) -> Result<CorpusConfig> {
    let mut c = CorpusConfig::default();
    kv.take_into("count", &mut c.count)?;
    kv.take_into("frames", &mut c.dims.frames)?;
    kv.take_into("channels", &mut c.dims.channels)?;
    kv.take_into("height", &mut c.dims.height)?;
    kv.take_into("width", &mut c.dims.width)?;
    kv.take_into("min_speed", &mut c.min_speed)?;
    kv.take_into("max_speed", &mut c.max_speed)?;
    Ok(c)
}

/// Records `0..train_count` (all when 0) of `corpus`.
fn train_indices(kv: &mut KeyValues, corpus: &Corpus) -> Result<Vec<usize>> {
    let count = kv.take::<usize>("train_count")?.unwrap_or(0);
    let n = if count == 0 { corpus.len() } else { count };
    if n > corpus.len() || n == 0 {
        return Err(Error::Validation(format!("train_count {n} with a corpus of {} records", corpus.len())));
    }
    Ok((0..n).collect())
}

fn require_checkpoint(path: Option<&PathBuf>, flag: &str) -> Result<Model> {
    let path = path.ok_or_else(|| Error::Validation(format!("{flag} is required")))?;
    load_checkpoint(path)
}

fn emit(report: &EvalReport, out: &Path) -> Result<()> {
    report.write(out)?;
    print!("{}", report.to_text());
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenCorpus(c) => {
            let mut kv = load_config(c.config.as_deref())?;
            let cfg = corpus_config(&mut kv)?;
            kv.finish()?;
            let corpus = generate_corpus(&cfg, c.seed)?;
            write_corpus(&c.out, &corpus)?;
            println!("wrote {} records to {}", corpus.len(), c.out.display());
        }
        Command::Pretrain { common: c, corpus } => {
            let mut kv = load_config(c.config.as_deref())?;
            let mut mcfg = ModelConfig::desk();
            mcfg.apply(&mut kv)?;
            let mut tcfg = TrainConfig::default();
            tcfg.apply(&mut kv)?;
            tcfg.seed = c.seed;
            let corpus = read_corpus(&corpus)?;
            let indices = train_indices(&mut kv, &corpus)?;
            kv.finish()?;
            mcfg.validate()?;
            let model = Model::new(mcfg, c.seed)?;
            let outcome = pretrain(model, &corpus, &indices, &tcfg, Some(&c.out))?;
            if let Some(last) = outcome.metrics.last() {
                println!("step {} loss {:.4}", last.step, last.loss);
            }
        }
        Command::FinetuneRetrieval { common: c, corpus, checkpoint, objective } => {
            let mut kv = load_config(c.config.as_deref())?;
            let mut tcfg = TrainConfig::default();
            tcfg.apply(&mut kv)?;
            tcfg.seed = c.seed;
            let objective = RetrievalObjective::parse(&objective)
                .ok_or_else(|| Error::Config(format!("unknown objective {objective}, expected vtm, vtc or both")))?;
            let corpus = read_corpus(&corpus)?;
            let indices = train_indices(&mut kv, &corpus)?;
            kv.finish()?;
            let model = load_checkpoint(&checkpoint)?;
            let outcome = finetune_retrieval(model, &corpus, &indices, &tcfg, objective, Some(&c.out))?;
            if let Some(last) = outcome.metrics.last() {
                println!("step {} loss {:.4}", last.step, last.loss);
            }
        }
        Command::EvalMc(a) => eval_command(a, eval_mc)?,
        Command::EvalRetrieval(a) => eval_command(a, eval_retrieval)?,
        Command::EvalCloze(a) => eval_command(a, eval_cloze)?,
        Command::AttnDist { eval: a, baseline_checkpoint } => {
            let mut kv = load_config(a.common.config.as_deref())?;
            let mut ecfg = EvalConfig::default();
            ecfg.apply(&mut kv)?;
            kv.finish()?;
            let rolling = require_checkpoint(a.checkpoint.as_ref(), "--checkpoint")?;
            let baseline = require_checkpoint(baseline_checkpoint.as_ref(), "--baseline-checkpoint")?;
            let corpus = read_corpus(&a.corpus)?;
            let (report, _, _) = attention_distribution(&rolling, &baseline, &corpus, &ecfg, a.common.seed)?;
            emit(&report, &a.common.out)?;
        }
        Command::BenchFlops(c) => {
            let mut kv = load_config(c.config.as_deref())?;
            let mut bcfg = BenchConfig::default();
            bcfg.apply(&mut kv)?;
            kv.finish()?;
            let (report, _) = bench_flops(&bcfg, c.seed)?;
            emit(&report, &c.out)?;
        }
    }
    Ok(())
}

fn eval_command(a: EvalArgs, f: fn(&Model, &Corpus, &EvalConfig, u64) -> Result<EvalReport>) -> Result<()> {
    let mut kv = load_config(a.common.config.as_deref())?;
    let mut ecfg = EvalConfig::default();
    ecfg.apply(&mut kv)?;
    kv.finish()?;
    let model = require_checkpoint(a.checkpoint.as_ref(), "--checkpoint")?;
    let corpus = read_corpus(&a.corpus)?;
    emit(&f(&model, &corpus, &ecfg, a.common.seed)?, &a.common.out)
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let line = e.to_string().replace('\n', " ");
            eprintln!("error[{}]: {line}", e.kind());
            ExitCode::FAILURE
        }
    }
}
