//! Checkpoint evaluation over a corpus split.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use textloc_core::metrics::{ap_cer, word_counts, deteval_default, ErrorCounts, MatchCounts, MetricBundle};
use textloc_core::synthgen::Corpus;
use textloc_core::{
    decode_box, decode_page, decode_text, dequantize, encode_prompt, expected_target, BBox, Diagnostics,
    EncodingScheme, TaskKind, TaskPrompt, TokenId, Vocabulary,
};
use textloc_model::{checkpoint, Generation, Model};

use crate::data::{load_pages, Page};
use crate::error::TrainError;

/// Anything that answers a prompt about a page with a token sequence.
pub trait Predictor {
    fn vocab(&self) -> &Vocabulary;
    fn scheme(&self) -> EncodingScheme;
    fn predict(&self, page: &Page, prompt: &TaskPrompt) -> Result<Generation, TrainError>;
}

impl Predictor for Model<f32> {
    fn vocab(&self) -> &Vocabulary {
        Model::vocab(self)
    }

    fn scheme(&self) -> EncodingScheme {
        self.config().scheme
    }

    fn predict(&self, page: &Page, prompt: &TaskPrompt) -> Result<Generation, TrainError> {
        let ids = encode_prompt(prompt, Model::vocab(self))?;
        Ok(self.generate(&page.ink(), &ids, self.config().max_seq_len)?)
    }
}

/// Answers every prompt with its ground-truth target.
#[derive(Debug, Clone)]
pub struct OraclePredictor {
    pub vocab: Vocabulary,
    pub scheme: EncodingScheme,
}

impl Predictor for OraclePredictor {
    fn vocab(&self) -> &Vocabulary {
        &self.vocab
    }

    fn scheme(&self) -> EncodingScheme {
        self.scheme
    }

    fn predict(&self, page: &Page, prompt: &TaskPrompt) -> Result<Generation, TrainError> {
        Ok(Generation { tokens: expected_target(prompt, &page.lines, &self.vocab, self.scheme)?, truncated: false })
    }
}

/// Pages plus the stored region and query prompts of one split.
#[derive(Debug, Clone)]
pub struct EvalSet {
    pub pages: Vec<Page>,
    /// `(page index, prompt)` for region and query tasks.
    pub prompts: Vec<(usize, TaskPrompt)>,
}

impl EvalSet {
    pub fn from_corpus(corpus: &Corpus, split: &str, limit: Option<usize>) -> Result<Self, TrainError> {
        let pages = load_pages(corpus, split, limit)?;
        if pages.is_empty() {
            return Err(TrainError::EmptySplit { split: split.into() });
        }
        let index: BTreeMap<&str, usize> = pages.iter().enumerate().map(|(i, p)| (p.id.as_str(), i)).collect();
        let mut prompts = Vec::new();
        for task in [TaskKind::ReadAt, TaskKind::FindIt] {
            for e in corpus.tasks(split, task)? {
                if let Some(&i) = index.get(e.id.as_str()) {
                    prompts.push((i, e.prompt()?));
                }
            }
        }
        Ok(EvalSet { pages, prompts })
    }
}

/// Per-sample record of the prediction dump.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DumpRow {
    pub id: String,
    pub task: TaskKind,
    pub prompt: String,
    pub label: String,
    pub prediction: String,
    pub diagnostics: Diagnostics,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TaskReport {
    pub samples: usize,
    pub metrics: MetricBundle,
    pub diagnostics: Diagnostics,
    /// Generations that hit the length limit.
    pub truncated: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub tasks: BTreeMap<TaskKind, TaskReport>,
}

impl EvalReport {
    pub fn get(&self, task: TaskKind) -> Option<&MetricBundle> {
        self.tasks.get(&task).map(|r| &r.metrics)
    }
}

#[derive(Default)]
struct Acc {
    samples: usize,
    chars: ErrorCounts,
    words: ErrorCounts,
    bag: MatchCounts,
    det: MatchCounts,
    transcripts: Vec<(String, String)>,
    boxes: Vec<(BBox, Option<BBox>)>,
    diagnostics: Diagnostics,
    truncated: usize,
}

impl Acc {
    fn text(&mut self, gt: &str, pred: &str) {
        self.chars.add(ErrorCounts::chars(gt, pred));
        self.words.add(ErrorCounts::words(gt, pred));
        self.bag.add(word_counts(gt.split_whitespace(), pred.split_whitespace()));
    }

    fn report(self, task: TaskKind) -> TaskReport {
        let mut m = MetricBundle::default();
        if task != TaskKind::FindIt {
            m.cer = Some(self.chars.rate());
            m.wer = Some(self.words.rate());
            m.set_words(self.bag.prf());
        }
        if task == TaskKind::OcrLayout {
            m.set_detection(self.det.prf());
        }
        if task == TaskKind::ReadAt {
            m.ap_cer = Some(ap_cer(&self.transcripts));
        }
        if task == TaskKind::FindIt {
            m.set_localization(&self.boxes);
        }
        TaskReport { samples: self.samples, metrics: m, diagnostics: self.diagnostics, truncated: self.truncated }
    }
}

fn page_text(lines: impl IntoIterator<Item = impl AsRef<str>>) -> String {
    lines.into_iter().map(|l| l.as_ref().to_string()).collect::<Vec<_>>().join("\n")
}

/// Scores one generation against the page; returns the decode diagnostics.
fn score(acc: &mut Acc, page: &Page, prompt: &TaskPrompt, tokens: &[TokenId], vocab: &Vocabulary, scheme: EncodingScheme) -> Diagnostics {
    match prompt {
        TaskPrompt::OcrOnly => {
            let (lines, diag) = decode_text(tokens, vocab);
            acc.text(&page_text(page.lines.iter().map(|l| &l.text)), &page_text(&lines));
            diag
        }
        TaskPrompt::OcrLayout => {
            let decoded = decode_page(tokens, vocab, scheme);
            acc.text(&page_text(page.lines.iter().map(|l| &l.text)), &page_text(decoded.elements.iter().map(|e| &e.text)));
            let gt: Vec<BBox> = page.lines.iter().map(|l| l.bbox).collect();
            let pred: Vec<BBox> = decoded.elements.iter().map(|e| e.bbox).collect();
            acc.det.add(deteval_default(&gt, &pred).counts);
            decoded.diagnostics
        }
        TaskPrompt::ReadAt(region) => {
            let (lines, diag) = decode_text(tokens, vocab);
            let picked = textloc_core::codec::lines_in_region(&page.lines, region, vocab.grid());
            let gt = page_text(picked.iter().map(|&i| &page.lines[i].text));
            let pred = page_text(&lines);
            acc.text(&gt, &pred);
            acc.transcripts.push((gt, pred));
            diag
        }
        TaskPrompt::FindIt(query) => {
            let (q, diag) = decode_box(tokens, vocab, scheme);
            let hits = textloc_core::codec::lines_matching(&page.lines, query);
            if let Some(&i) = hits.first() {
                acc.boxes.push((page.lines[i].bbox, q.map(|q| dequantize(&q, vocab.grid()))));
            }
            diag
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct EvalOptions {
    pub tasks: Vec<TaskKind>,
    /// Where to write the JSONL prediction dump.
    pub dump: Option<std::path::PathBuf>,
}

impl EvalOptions {
    pub fn all() -> Self {
        EvalOptions { tasks: TaskKind::ALL.to_vec(), dump: None }
    }
}

/// Runs every requested task over the set. Text tasks use every page;
/// region and query tasks use the stored prompts.
pub fn evaluate(predictor: &dyn Predictor, set: &EvalSet, opts: &EvalOptions) -> Result<EvalReport, TrainError> {
    let vocab = predictor.vocab().clone();
    let scheme = predictor.scheme();
    let mut dump = match &opts.dump {
        Some(p) => Some(std::io::BufWriter::new(std::fs::File::create(p).map_err(|e| TrainError::io(p, e))?)),
        None => None,
    };
    let mut jobs: Vec<(usize, TaskPrompt)> = Vec::new();
    for &task in &opts.tasks {
        match task {
            TaskKind::OcrOnly => jobs.extend((0..set.pages.len()).map(|i| (i, TaskPrompt::OcrOnly))),
            TaskKind::OcrLayout => jobs.extend((0..set.pages.len()).map(|i| (i, TaskPrompt::OcrLayout))),
            _ => jobs.extend(set.prompts.iter().filter(|(_, p)| p.kind() == task).cloned()),
        }
    }
    let mut accs: BTreeMap<TaskKind, Acc> = opts.tasks.iter().map(|&t| (t, Acc::default())).collect();
    for (i, prompt) in jobs {
        let page = &set.pages[i];
        let generation = predictor.predict(page, &prompt)?;
        let acc = accs.get_mut(&prompt.kind()).expect("task requested");
        acc.samples += 1;
        acc.truncated += usize::from(generation.truncated);
        let diag = score(acc, page, &prompt, &generation.tokens, &vocab, scheme);
        acc.diagnostics.merge(&diag);
        if let Some(w) = dump.as_mut() {
            let label = expected_target(&prompt, &page.lines, &vocab, scheme)?;
            let row = DumpRow {
                id: page.id.clone(),
                task: prompt.kind(),
                prompt: vocab.render(&encode_prompt(&prompt, &vocab)?),
                label: vocab.render(&label),
                prediction: vocab.render(&generation.tokens),
                diagnostics: diag,
            };
            let line = serde_json::to_string(&row)?;
            writeln!(w, "{line}").map_err(|e| TrainError::io(opts.dump.as_ref().expect("dump path"), e))?;
        }
    }
    if let Some(mut w) = dump {
        w.flush().map_err(|e| TrainError::io(opts.dump.as_ref().expect("dump path"), e))?;
    }
    Ok(EvalReport { tasks: accs.into_iter().map(|(t, a)| (t, a.report(t))).collect() })
}

/// Loads a checkpoint, checks it against the corpus grid, and evaluates it.
pub fn evaluate_checkpoint(path: &Path, corpus: &Corpus, split: &str, limit: Option<usize>, opts: &EvalOptions) -> Result<EvalReport, TrainError> {
    let vocab = Vocabulary::new(corpus.grid());
    let model = checkpoint::load_expecting(path, &vocab)?;
    let set = EvalSet::from_corpus(corpus, split, limit)?;
    evaluate(&model, &set, opts)
}

/// Micro-averaged text-only CER of greedy OCR over `pages`.
pub fn text_cer(model: &Model<f32>, pages: &[Page]) -> Result<f64, TrainError> {
    let set = EvalSet { pages: pages.to_vec(), prompts: Vec::new() };
    let report = evaluate(model, &set, &EvalOptions { tasks: vec![TaskKind::OcrOnly], dump: None })?;
    Ok(report.get(TaskKind::OcrOnly).and_then(|m| m.cer).unwrap_or(1.0))
}

