use tokenroll::data::{generate_corpus, tokenize, ClipDims, Corpus, CorpusConfig};
use tokenroll::eval::{
    attention_distribution, bench_flops, build_mc_items, eval_cloze, eval_mc, eval_retrieval, mc_scores, BenchConfig,
    EvalConfig,
};
use tokenroll::model::{Model, ModelConfig};
use tokenroll::rolling::{attention_flops, RollingConfig, TemporalMode};
use tokenroll::train::argmax;
use tokenroll::Error;

fn cfg() -> ModelConfig {
    ModelConfig {
        dim: 16,
        heads: 2,
        layers: 2,
        height: 16,
        width: 16,
        max_text: 6,
        vtc_dim: 8,
        qa_answers: 4,
        ..ModelConfig::desk()
    }
}

fn corpus(count: usize) -> Corpus {
    let dims = ClipDims { height: 16, width: 16, ..ClipDims::DESK };
    generate_corpus(&CorpusConfig { count, dims, min_speed: 1, max_speed: 3 }, 11).unwrap()
}

#[test]
fn duplicated_truth_resolves_to_lowest_index() {
    let model = Model::new(cfg(), 1).unwrap();
    let c = corpus(3);
    let truth = tokenize(&c.captions[0], &c.vocab, 6).unwrap().ids;
    let other = tokenize("the blue circle moves up", &c.vocab, 6).unwrap().ids;
    let cands = vec![truth.clone(), other.clone(), other.clone(), truth, other];
    let scores = mc_scores(&model, &c.clips[0].frames, &cands).unwrap();
    assert_eq!(scores[0], scores[3]);
    let pick = argmax(&scores);
    assert!(pick == 0 || pick == 1, "tie must resolve to index 0 or a strictly better candidate");
    if scores[0] >= scores[1] {
        assert_eq!(pick, 0);
    }
}

#[test]
fn mc_items_follow_the_distractor_policy() {
    let c = corpus(50);
    let items = build_mc_items(&c, &(0..50).collect::<Vec<_>>(), 6, 3).unwrap();
    for item in &items {
        let mut kinds = item.kinds.clone();
        kinds.sort_unstable();
        assert_eq!(kinds, ["color", "direction", "direction", "shape", "truth"]);
        assert_eq!(item.kinds[item.answer], "truth");
        let truth = &item.candidates[item.answer];
        for (i, cand) in item.candidates.iter().enumerate() {
            let diffs = cand.iter().zip(truth).filter(|(a, b)| a != b).count();
            assert_eq!(diffs, usize::from(i != item.answer));
        }
    }
    // The answer position is shuffled.
    assert!(items.iter().any(|i| i.answer != items[0].answer));

    let mut bad = items[0].clone();
    bad.candidates[(bad.answer + 1) % 5] = bad.candidates[bad.answer].clone();
    assert!(matches!(bad.validate(), Err(Error::Validation(_))));
    bad.candidates.truncate(1);
    bad.kinds.truncate(1);
    bad.answer = 0;
    assert!(matches!(bad.validate(), Err(Error::Validation(_))));
}

#[test]
fn random_model_is_at_chance_on_multiple_choice() {
    let c = corpus(300);
    let model = Model::new(cfg(), 2).unwrap();
    let r = eval_mc(&model, &c, &EvalConfig { batch_size: 100, ..Default::default() }, 5).unwrap();
    let acc = r.metric("accuracy").unwrap();
    // An untrained scorer is a fixed function of the caption words, so the
    // truth must beat one color swap, one shape swap and two direction
    // swaps. Independent noise per candidate gives 1/5; a word-additive
    // preference gives 1/2 * 1/2 * 1/3 = 1/12. Allow 3 sigma (about 0.07
    // at n = 300) beyond both.
    assert!((1.0 / 12.0 - 0.07..0.2 + 0.07).contains(&acc), "{acc}");
    assert_eq!(r.metric("items"), Some(300.0));
}

#[test]
fn retrieval_embeds_each_item_once() {
    let c = corpus(24);
    let model = Model::new(cfg(), 3).unwrap();
    let ecfg = EvalConfig { batch_size: 7, ..Default::default() };
    let r = eval_retrieval(&model, &c, &ecfg, 0).unwrap();
    assert_eq!(r.metric("embed_calls"), Some(48.0));
    assert_eq!(model.embed_calls(), 48);
    r.validate().unwrap();

    let short = EvalConfig { eval_count: 9, ..ecfg };
    assert!(matches!(eval_retrieval(&model, &c, &short, 0), Err(Error::Validation(_))));
}

#[test]
fn repeated_embedding_is_bitwise_stable() {
    let c = corpus(4);
    let model = Model::new(cfg(), 4).unwrap();
    let ids: Vec<Vec<usize>> = c.captions.iter().map(|t| tokenize(t, &c.vocab, 6).unwrap().ids).collect();
    assert_eq!(model.embed_texts(&ids).unwrap(), model.embed_texts(&ids).unwrap());
    let clips: Vec<&[f32]> = c.clips.iter().map(|x| x.frames.as_slice()).collect();
    assert_eq!(model.embed_videos(&clips).unwrap(), model.embed_videos(&clips).unwrap());
}

#[test]
fn cloze_exports_one_row_per_patch_slot() {
    let c = corpus(6);
    let model = Model::new(cfg(), 5).unwrap();
    let ecfg = EvalConfig { export_items: 2, ..Default::default() };
    let r = eval_cloze(&model, &c, &ecfg, 0).unwrap();
    let table = r.table.as_ref().unwrap();
    let slots = model.config.frames * model.config.patches_per_frame();
    assert_eq!(table.rows.len(), 2 * 3 * slots);
    assert!(table.rows.iter().all(|row| row[6].parse::<f64>().unwrap().is_finite()));
    for key in ["color_accuracy", "shape_accuracy", "direction_accuracy"] {
        assert!(r.metric(key).is_some(), "{key}");
    }
}

#[test]
fn cloze_rejects_a_caption_without_the_slot_word() {
    let mut c = corpus(3);
    c.captions[1] = "the red square stays still".into();
    let model = Model::new(cfg(), 5).unwrap();
    let err = eval_cloze(&model, &c, &EvalConfig::default(), 0).unwrap_err();
    assert!(matches!(err, Error::Validation(ref s) if s.contains("direction")), "{err}");
}

#[test]
fn attention_distribution_notes_the_vacuous_baseline() {
    let c = corpus(4);
    let rolling = Model::new(cfg(), 6).unwrap();
    let baseline = Model::new(ModelConfig { rolling: RollingConfig::disabled(), ..cfg() }, 6).unwrap();
    let (report, r, b) = attention_distribution(&rolling, &baseline, &c, &EvalConfig::default(), 0).unwrap();
    assert!(report.notes.iter().any(|n| n.contains("vacuous")));
    assert_eq!(r.per_slot.len(), rolling.config.patches_per_frame());
    assert!(r.rolled > 0.0 && b.rolled > 0.0);

    let flat = Model::new(ModelConfig { temporal: TemporalMode::Flatten, ..cfg() }, 6).unwrap();
    assert!(matches!(
        attention_distribution(&rolling, &flat, &c, &EvalConfig::default(), 0),
        Err(Error::Validation(_))
    ));
    assert!(matches!(
        attention_distribution(&baseline, &rolling, &c, &EvalConfig::default(), 0),
        Err(Error::Validation(_))
    ));
}

#[test]
fn bench_counts_match_on_a_small_sweep() {
    let bc = BenchConfig {
        frames: vec![1, 3],
        text: vec![4],
        patches: vec![4, 9],
        dims: vec![8],
        heads: 2,
        layers: 1,
        reps: 1,
        wall_frames: vec![],
        ..Default::default()
    };
    let (report, walls) = bench_flops(&bc, 0).unwrap();
    assert_eq!(report.metric("count_mismatches"), Some(0.0));
    assert_eq!(report.metric("count_checks"), Some(12.0));
    assert_eq!(report.metric("flatten_entries_s3_m16_n196"), Some(364_816.0));
    assert_eq!(report.metric("rolling_entries_s3_m16_n196"), Some(134_832.0));
    assert!(walls.is_empty());
    let s1 = |mode| attention_flops(1, 16, 196, mode);
    assert_eq!(s1(TemporalMode::Rolling), s1(TemporalMode::Flatten));
}

#[test]
fn eval_reports_are_reproducible() {
    let c = corpus(12);
    let model = Model::new(cfg(), 8).unwrap();
    let e = EvalConfig::default();
    assert_eq!(eval_mc(&model, &c, &e, 1).unwrap().to_text(), eval_mc(&model, &c, &e, 1).unwrap().to_text());
    assert_eq!(eval_cloze(&model, &c, &e, 1).unwrap().table, eval_cloze(&model, &c, &e, 1).unwrap().table);
}
