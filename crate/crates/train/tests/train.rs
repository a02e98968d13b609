use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use textloc_core::synthgen::{build_corpus, Corpus, CorpusConfig, PageSpec};
use textloc_core::{BBox, EncodingScheme, LineElement, QuantBox, QuantGrid, TaskKind, TaskPrompt, Vocabulary};
use textloc_train::eval::DumpRow;
use textloc_model::{checkpoint, ConvStage, Generation, ParamGroup};
use textloc_train::config::TASK_INTRODUCED_AT;
use textloc_train::studies::{ablate_grid, padding_table, words_per_query, PadCase};
use textloc_train::trainer::{stage_checkpoint, LOG_FILE, STATE_FILE};
use textloc_train::{
    evaluate, load_pages, task_sampler, BatchSource, EvalOptions, EvalSet, LogRow, ModelShape, OraclePredictor, Page,
    Predictor, RunOutcome, Schedule, StagePlan, TrainConfig, TrainError, TrainState, Trainer,
};

fn tiny_corpus(n: usize) -> (tempfile::TempDir, Corpus) {
    let dir = tempfile::tempdir().unwrap();
    let mut spec = PageSpec::wiki(128, 64);
    spec.lines = (1, 2);
    spec.words_per_line = (2, 5);
    let mut cfg = CorpusConfig::new(n, 3, spec);
    cfg.splits = vec![("train".into(), 0.75), ("test".into(), 0.25)];
    let path = dir.path().join("c");
    build_corpus(&cfg, &path).unwrap();
    let corpus = Corpus::open(&path).unwrap();
    (dir, corpus)
}

fn tiny_shape() -> ModelShape {
    ModelShape {
        encoder: vec![ConvStage { channels: 4, stride: [2, 2] }, ConvStage { channels: 8, stride: [2, 2] }],
        d_model: 16,
        heads: 2,
        layers: 1,
        ffn: 32,
        max_seq_len: 160,
        dropout: 0.0,
        seed: 1,
    }
}

fn tiny_config(steps: [usize; 4]) -> TrainConfig {
    let mut cfg = TrainConfig::new(9, StagePlan::progressive(steps, 2, 3e-3));
    cfg.model = tiny_shape();
    cfg.log_every = 2;
    cfg
}

struct Setup {
    _dir: tempfile::TempDir,
    vocab: Vocabulary,
    pages: Vec<Page>,
}

fn setup(n: usize) -> Setup {
    let (dir, corpus) = tiny_corpus(n);
    let pages = load_pages(&corpus, "train", None).unwrap();
    Setup { vocab: Vocabulary::new(corpus.grid()), pages, _dir: dir }
}

fn trainer<'a>(cfg: &'a TrainConfig, s: &'a Setup, out: Option<&'a std::path::Path>) -> Trainer<'a> {
    Trainer {
        config: cfg,
        source: BatchSource { pages: &s.pages, vocab: &s.vocab, scheme: cfg.scheme, find_it_words: cfg.find_it_words, seed: cfg.seed },
        validation: &[],
        out_dir: out,
    }
}

fn run_all(t: &Trainer, state: &mut TrainState, pause_at: Option<usize>) -> (RunOutcome, Vec<LogRow>) {
    let mut rows = Vec::new();
    let outcome = t.run(state, pause_at, &mut |r| rows.push(*r)).unwrap();
    (outcome, rows)
}

#[test]
fn sampler_single_task_mix() {
    let s = task_sampler([1.0, 0.0, 0.0, 0.0], ChaCha8Rng::seed_from_u64(0)).unwrap();
    assert!(s.take(1000).all(|t| t == TaskKind::OcrOnly));
    let s = task_sampler([0.0, 0.0, 0.0, 1.0], ChaCha8Rng::seed_from_u64(0)).unwrap();
    assert!(s.take(1000).all(|t| t == TaskKind::FindIt));
}

#[test]
fn sampler_frequencies_follow_the_mix() {
    let s = task_sampler([0.25; 4], ChaCha8Rng::seed_from_u64(42)).unwrap();
    let mut counts = [0usize; 4];
    for t in s.take(10_000) {
        counts[t.index()] += 1;
    }
    for c in counts {
        assert!((c as f64 / 10_000.0 - 0.25).abs() <= 0.02, "{counts:?}");
    }
}

#[test]
fn sampler_is_seeded() {
    let a: Vec<TaskKind> = task_sampler([0.4, 0.2, 0.2, 0.2], ChaCha8Rng::seed_from_u64(5)).unwrap().take(500).collect();
    let b: Vec<TaskKind> = task_sampler([0.4, 0.2, 0.2, 0.2], ChaCha8Rng::seed_from_u64(5)).unwrap().take(500).collect();
    assert_eq!(a, b);
    assert!(task_sampler([0.5, 0.2, 0.2, 0.2], ChaCha8Rng::seed_from_u64(5)).is_err());
}

#[test]
fn plan_validation() {
    let plan = StagePlan::progressive([1, 1, 1, 1], 1, 1e-3);
    plan.validate().unwrap();
    let mut bad = plan.clone();
    bad.stages[0].groups.push(ParamGroup::Decoder);
    assert!(bad.validate().is_err());
    let mut bad = plan.clone();
    bad.stages[1].task_mix = [0.5, 0.5, 0.0, 0.0];
    assert!(bad.validate().is_err());
    let mut bad = plan.clone();
    bad.stages[2].task_mix = [0.5, 0.0, 0.5, 0.0];
    assert!(bad.validate().is_err());
    assert!(StagePlan { stages: vec![] }.validate().is_err());
    for (i, s) in plan.stages.iter().enumerate() {
        for t in TaskKind::ALL {
            assert!(s.task_mix[t.index()] == 0.0 || TASK_INTRODUCED_AT[t.index()] <= i);
        }
    }
}

#[test]
fn schedule_warms_up_then_decays() {
    let s = Schedule { lr: 1.0, warmup: 10, min_lr_frac: 0.1 };
    assert!((s.lr_at(0, 100) - 0.1).abs() < 1e-12);
    assert!((s.lr_at(9, 100) - 1.0).abs() < 1e-12);
    assert!((s.lr_at(10, 100) - 1.0).abs() < 1e-12);
    assert!((s.lr_at(100, 100) - 0.1).abs() < 1e-12);
    let lrs: Vec<f64> = (10..100).map(|k| s.lr_at(k, 100)).collect();
    assert!(lrs.windows(2).all(|w| w[1] <= w[0]));
}

#[test]
fn config_files_round_trip() {
    let cfg = tiny_config([2, 2, 2, 2]);
    let dir = tempfile::tempdir().unwrap();
    let json = dir.path().join("c.json");
    std::fs::write(&json, serde_json::to_string(&cfg).unwrap()).unwrap();
    assert_eq!(TrainConfig::load(&json).unwrap(), cfg);
    let toml_path = dir.path().join("c.toml");
    let text = r#"
seed = 7
log_every = 5

[[plan.stages]]
name = "calibrate"
task_mix = [1.0, 0.0, 0.0, 0.0]
groups = ["encoder"]
steps = 3
batch_size = 2
lambda = 0.5
weight_decay = 0.01
clip_norm = 1.0
schedule = { lr = 0.002, warmup = 1, min_lr_frac = 0.1 }
"#;
    std::fs::write(&toml_path, text).unwrap();
    let loaded = TrainConfig::load(&toml_path).unwrap();
    assert_eq!(loaded.seed, 7);
    assert_eq!(loaded.plan.stages[0].groups, vec![ParamGroup::Encoder]);
    assert_eq!(loaded.model, ModelShape::desk());
    std::fs::write(&toml_path, text.replace("[\"encoder\"]", "[\"encoder\", \"decoder\"]")).unwrap();
    assert!(matches!(TrainConfig::load(&toml_path), Err(TrainError::Config(_))));
}

#[test]
fn batches_are_a_function_of_seed_stage_and_step() {
    let s = setup(24);
    let src = BatchSource { pages: &s.pages, vocab: &s.vocab, scheme: EncodingScheme::Original, find_it_words: (1, 3), seed: 1 };
    let a = src.batch(3, 7, [0.25; 4], 6).unwrap();
    assert_eq!(a, src.batch(3, 7, [0.25; 4], 6).unwrap());
    assert_ne!(a, src.batch(3, 8, [0.25; 4], 6).unwrap());
    let ocr = src.batch(0, 0, [1.0, 0.0, 0.0, 0.0], 4).unwrap();
    let task = s.vocab.task(TaskKind::OcrOnly);
    assert!(ocr.samples.iter().all(|x| x.prompt == vec![task]));
}

#[test]
fn stage_one_leaves_the_decoder_untouched() {
    let s = setup(24);
    let cfg = tiny_config([4, 1, 1, 1]).plan.clone();
    let mut cfg_one = tiny_config([4, 1, 1, 1]);
    cfg_one.plan = cfg.truncated(1);
    let t = trainer(&cfg_one, &s, None);
    let mut state = t.init_state().unwrap();
    let before = state.model.params().to_vec();
    run_all(&t, &mut state, None);
    let specs = state.model.param_specs().to_vec();
    let mut encoder_moved = false;
    for (i, spec) in specs.iter().enumerate() {
        if spec.group == ParamGroup::Decoder {
            assert_eq!(state.model.params()[i], before[i], "{} changed", spec.name);
            assert!(state.optimizer.m[i].iter().chain(&state.optimizer.v[i]).all(|&x| x == 0.0));
            assert_eq!(state.optimizer.steps[i], 0);
        } else {
            encoder_moved |= state.model.params()[i] != before[i];
        }
    }
    assert!(encoder_moved);
}

#[test]
fn identical_seeds_give_identical_logs() {
    let s = setup(24);
    let cfg = tiny_config([2, 2, 2, 2]);
    let t = trainer(&cfg, &s, None);
    let (_, a) = run_all(&t, &mut t.init_state().unwrap(), None);
    let (_, b) = run_all(&t, &mut t.init_state().unwrap(), None);
    assert_eq!(a, b);
    assert_eq!(a.len(), 4);
    assert_eq!(a.iter().map(|r| r.stage).collect::<Vec<_>>(), vec![1, 2, 3, 4]);
}

#[test]
fn resumed_run_matches_uninterrupted_run() {
    let s = setup(24);
    let mut cfg = tiny_config([2, 3, 3, 2]);
    cfg.log_every = 1;
    let t = trainer(&cfg, &s, None);
    let mut full_state = t.init_state().unwrap();
    let (_, full) = run_all(&t, &mut full_state, None);
    for pause in [1, 4, 7] {
        let mut state = t.init_state().unwrap();
        let (outcome, mut rows) = run_all(&t, &mut state, Some(pause));
        assert_eq!(outcome, RunOutcome::Paused);
        let bytes = state.to_bytes().unwrap();
        let mut resumed = TrainState::from_bytes(&bytes).unwrap();
        assert_eq!(resumed.to_bytes().unwrap(), bytes);
        let (outcome, rest) = run_all(&t, &mut resumed, None);
        assert_eq!(outcome, RunOutcome::Finished);
        rows.extend(rest);
        assert_eq!(rows, full, "pause at {pause}");
        assert_eq!(resumed.model.params(), full_state.model.params());
        assert_eq!(resumed.history, full_state.history);
    }
}

#[test]
fn run_writes_checkpoints_and_log() {
    let s = setup(24);
    let cfg = tiny_config([1, 1, 1, 1]);
    let out = tempfile::tempdir().unwrap();
    let t = trainer(&cfg, &s, Some(out.path()));
    let mut state = t.init_state().unwrap();
    run_all(&t, &mut state, None);
    for n in 0..=4 {
        assert!(stage_checkpoint(out.path(), n).exists());
    }
    let last = checkpoint::load(&stage_checkpoint(out.path(), 4)).unwrap();
    assert_eq!(last.params(), state.model.params());
    let log = std::fs::read_to_string(out.path().join(LOG_FILE)).unwrap();
    for line in log.lines() {
        let v: serde_json::Value = serde_json::from_str(line).unwrap();
        let keys: Vec<&String> = v.as_object().unwrap().keys().collect();
        assert_eq!(keys.len(), 5);
        for k in ["step", "stage", "total", "text_ce", "loc_ce"] {
            assert!(v.get(k).is_some());
        }
    }
    let saved = TrainState::load(&out.path().join(STATE_FILE)).unwrap();
    assert_eq!(saved.stage, 4);
}

#[test]
fn non_finite_loss_halts_with_last_good_checkpoint() {
    let s = setup(24);
    let cfg = tiny_config([2, 2, 2, 2]);
    let out = tempfile::tempdir().unwrap();
    let t = trainer(&cfg, &s, Some(out.path()));
    let mut state = t.init_state().unwrap();
    run_all(&t, &mut state, Some(3));
    let emb = state.model.param_specs().iter().position(|p| p.name == "enc.proj.w").unwrap();
    state.model.params_mut()[emb][0] = f32::NAN;
    let err = t.run(&mut state, None, &mut |_| {}).unwrap_err();
    match err {
        TrainError::NonFiniteLoss { stage, last_good, .. } => {
            assert_eq!(stage, 2);
            assert_eq!(last_good, stage_checkpoint(out.path(), 1));
            assert!(last_good.exists());
        }
        e => panic!("unexpected error {e}"),
    }
}

struct Silent(Vocabulary);

impl Predictor for Silent {
    fn vocab(&self) -> &Vocabulary {
        &self.0
    }
    fn scheme(&self) -> EncodingScheme {
        EncodingScheme::Original
    }
    fn predict(&self, _: &Page, _: &TaskPrompt) -> Result<Generation, TrainError> {
        Ok(Generation { tokens: vec![self.0.bos(), self.0.eos()], truncated: false })
    }
}

/// Two pages whose line boxes sit exactly on the 10 px grid, so token-perfect
/// answers dequantize to the ground truth.
fn aligned_set() -> (Vocabulary, EvalSet) {
    let vocab = Vocabulary::new(QuantGrid::new(10, 120, 60).unwrap());
    let line = |t: &str, b: [f64; 4]| LineElement::new(t, BBox::new(b[0], b[1], b[2], b[3]).unwrap());
    let page = |id: &str, lines: Vec<LineElement>| Page { id: id.into(), width: 120, height: 60, luma: vec![255; 120 * 60], lines };
    let pages = vec![
        page("a", vec![line("alpha beta gamma", [10.0, 10.0, 90.0, 20.0]), line("delta eps", [10.0, 30.0, 60.0, 40.0])]),
        page("b", vec![line("one two", [20.0, 0.0, 70.0, 20.0])]),
    ];
    let prompts = vec![
        (0, TaskPrompt::ReadAt(QuantBox { ix1: 0, iy1: 0, ix2: 9, iy2: 2 })),
        (0, TaskPrompt::FindIt("beta gamma".into())),
        (1, TaskPrompt::FindIt("one".into())),
    ];
    (vocab, EvalSet { pages, prompts })
}

#[test]
fn perfect_and_empty_predictions() {
    let (vocab, set) = aligned_set();
    let dump_dir = tempfile::tempdir().unwrap();
    let dump = dump_dir.path().join("dump.jsonl");
    let oracle = OraclePredictor { vocab: vocab.clone(), scheme: EncodingScheme::Original };
    let report = evaluate(&oracle, &set, &EvalOptions { tasks: TaskKind::ALL.to_vec(), dump: Some(dump.clone()) }).unwrap();
    let layout = report.get(TaskKind::OcrLayout).unwrap();
    assert_eq!(layout.cer, Some(0.0));
    assert_eq!(layout.det_f1, Some(1.0));
    assert_eq!(layout.word_f1, Some(1.0));
    assert_eq!(report.get(TaskKind::OcrOnly).unwrap().cer, Some(0.0));
    assert_eq!(report.get(TaskKind::ReadAt).unwrap().ap_cer, Some(1.0));
    assert_eq!(report.get(TaskKind::FindIt).unwrap().ap_iou_50, Some(1.0));
    assert_eq!(report.get(TaskKind::FindIt).unwrap().ap_iou_80, Some(1.0));
    let samples: usize = report.tasks.values().map(|r| r.samples).sum();
    assert_eq!(samples, 7);
    let rows: Vec<DumpRow> = std::fs::read_to_string(&dump).unwrap().lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(rows.len(), samples);
    assert!(rows.iter().all(|r| r.label == r.prediction));
    assert_eq!(rows[0].prompt, "<ocr>");
    for r in report.tasks.values() {
        assert_eq!(r.diagnostics, Default::default());
    }

    let empty = evaluate(&Silent(vocab), &set, &EvalOptions::all()).unwrap();
    let layout = empty.get(TaskKind::OcrLayout).unwrap();
    assert_eq!(layout.det_recall, Some(0.0));
    assert_eq!(layout.word_recall, Some(0.0));
    assert_eq!(layout.cer, Some(1.0));
    assert_eq!(empty.get(TaskKind::FindIt).unwrap().ap_iou_50, Some(0.0));
    assert_eq!(empty.get(TaskKind::ReadAt).unwrap().ap_cer, Some(0.0));
}

#[test]
fn oracle_on_a_generated_corpus_hits_the_quantization_ceiling() {
    let (_dir, corpus) = tiny_corpus(40);
    let set = EvalSet::from_corpus(&corpus, "test", None).unwrap();
    let oracle = OraclePredictor { vocab: Vocabulary::new(corpus.grid()), scheme: EncodingScheme::Original };
    let report = evaluate(&oracle, &set, &EvalOptions::all()).unwrap();
    assert_eq!(report.get(TaskKind::OcrLayout).unwrap().cer, Some(0.0));
    assert_eq!(report.get(TaskKind::ReadAt).unwrap().cer, Some(0.0));
    assert!(report.get(TaskKind::OcrLayout).unwrap().det_f1.unwrap() > 0.5);
    for r in report.tasks.values() {
        for (k, v) in r.metrics.values() {
            assert!((0.0..=1.0).contains(&v), "{k}");
        }
    }
}

#[test]
fn grid_study_error_shrinks_with_step() {
    let s = setup(24);
    let rows = ablate_grid(&[10, 5, 3], (128, 64), &s.pages, None).unwrap();
    assert_eq!(rows.len(), 3);
    assert!(rows[0].mean_corner_error > rows[1].mean_corner_error);
    assert!(rows[1].mean_corner_error > rows[2].mean_corner_error);
    for r in &rows {
        assert!(r.mean_corner_error < f64::from(r.step_px));
    }
    assert_eq!(rows[2].tokens, (43, 22));
}

#[test]
fn words_per_query_with_oracle_answers() {
    let (vocab, set) = aligned_set();
    let oracle = OraclePredictor { vocab, scheme: EncodingScheme::Original };
    let report = words_per_query(&oracle, &set.pages, &[(1, 1), (2, 3)], 4).unwrap();
    assert_eq!(report.buckets.len(), 2);
    assert_eq!(report.buckets[0].queries, 2);
    assert!(report.buckets.iter().all(|b| b.ap_iou_50 == 1.0));
    assert!(report.direction_holds && report.warning.is_none());
    let silent = words_per_query(&Silent(oracle.vocab.clone()), &set.pages, &[(1, 1), (2, 3)], 4).unwrap();
    assert!(silent.buckets.iter().all(|b| b.ap_iou_50 == 0.0));
}

#[test]
fn padding_keeps_counts_and_pad_zero_is_plain() {
    let s = setup(24);
    let cases: Vec<PadCase> = s
        .pages
        .iter()
        .map(|p| PadCase {
            gt: p.lines.iter().map(|l| l.bbox).collect(),
            pred: p.lines.iter().map(|l| textloc_core::BBox::new(l.bbox.x1 + 1.0, l.bbox.y1 + 1.0, l.bbox.x2 - 1.0, l.bbox.y2 - 1.0).unwrap()).collect(),
            width: p.width as f64,
            height: p.height as f64,
        })
        .collect();
    let rows = padding_table(&cases, &[0.0, 1.0, 2.0]);
    for r in &rows {
        assert_eq!(r.counts.gt, rows[0].counts.gt);
        assert_eq!(r.counts.pred, rows[0].counts.pred);
    }
    assert_eq!(rows[1].prf.f1, 1.0);
}
