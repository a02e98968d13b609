//! The operations behind each CLI subcommand.
//!
//! Every command that writes files registers them with an [`Outputs`]
//! guard first; if the command fails, whatever it created is removed.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use textloc_core::synthgen::{build_corpus, Corpus, CorpusConfig, CorpusSummary, PageSpec};
use textloc_core::{TaskKind, Vocabulary};
use textloc_model::{checkpoint, location_embedding_continuity, ContinuityReport};
use textloc_train::eval::{evaluate, EvalOptions, EvalReport, EvalSet, OraclePredictor, Predictor};
use textloc_train::studies::{ablate_encodings, ablate_grid, GridRow, SchemeTable};
use textloc_train::trainer::STATE_FILE;
use textloc_train::{load_pages, BatchSource, LogRow, RunOutcome, TrainConfig, TrainError, TrainState, Trainer};

use crate::error::Error;
use crate::inference::{Engine, InferenceRequest, InferenceResponse, ServiceTask};

/// Paths a command is about to create. Dropped without [`Outputs::commit`],
/// it deletes them again.
#[derive(Debug, Default)]
pub struct Outputs {
    paths: Vec<PathBuf>,
    committed: bool,
}

impl Outputs {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers `path` for cleanup unless it already exists.
    pub fn claim(&mut self, path: &Path) -> PathBuf {
        if !path.exists() {
            self.paths.push(path.to_path_buf());
        }
        path.to_path_buf()
    }

    pub fn commit(mut self) {
        self.committed = true;
    }
}

impl Drop for Outputs {
    fn drop(&mut self) {
        if self.committed {
            return;
        }
        for p in self.paths.iter().rev() {
            let removed = if p.is_dir() { fs::remove_dir_all(p) } else { fs::remove_file(p) };
            if removed.is_ok() {
                log::warn!("removed partial output {}", p.display());
            }
        }
    }
}

/// Reads a TOML (by extension) or JSON file.
pub fn load_config<T: DeserializeOwned>(path: &Path) -> Result<T, Error> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(match path.extension().and_then(|e| e.to_str()) {
        Some("toml") => toml::from_str(&text)?,
        _ => serde_json::from_str(&text)?,
    })
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), Error> {
    let text = serde_json::to_string_pretty(value)?;
    fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Template {
    Wiki,
    Receipt,
    Mixed,
}

#[derive(Debug, Clone)]
pub struct GenOptions {
    pub out: PathBuf,
    /// Corpus recipe file; the remaining fields override it when set.
    pub config: Option<PathBuf>,
    pub n: Option<usize>,
    pub seed: Option<u64>,
    pub template: Template,
    pub width: u32,
    pub height: u32,
}

pub fn gen(opts: &GenOptions) -> Result<CorpusSummary, Error> {
    let mut cfg = match &opts.config {
        Some(p) => load_config::<CorpusConfig>(p)?,
        None => {
            let (w, h) = (opts.width, opts.height);
            let mut cfg = CorpusConfig::new(200, 0, PageSpec::wiki(w, h));
            cfg.templates = match opts.template {
                Template::Wiki => vec![PageSpec::wiki(w, h)],
                Template::Receipt => vec![PageSpec::receipt(w, h)],
                Template::Mixed => vec![PageSpec::wiki(w, h), PageSpec::receipt(w, h)],
            };
            cfg
        }
    };
    if let Some(n) = opts.n {
        cfg.n = n;
    }
    if let Some(seed) = opts.seed {
        cfg.seed = seed;
    }
    Ok(build_corpus(&cfg, &opts.out)?)
}

#[derive(Debug, Clone)]
pub struct TrainOptions {
    pub config: PathBuf,
    pub corpus: PathBuf,
    pub out: PathBuf,
    pub split: String,
    pub validation_split: String,
    pub limit: Option<usize>,
    /// Continue from `state.ckpt` in `out` when present.
    pub resume: bool,
    /// Stop (saving state) once this many global steps are done.
    pub pause_at: Option<usize>,
}

#[derive(Debug, Clone, Serialize)]
pub struct TrainSummary {
    pub outcome: String,
    pub global_step: usize,
    pub stages: Vec<textloc_train::state::StageReport>,
    pub best: Option<textloc_train::state::BestSnapshot>,
}

pub fn train(opts: &TrainOptions, on_log: &mut dyn FnMut(&LogRow)) -> Result<TrainSummary, Error> {
    let config = TrainConfig::load(&opts.config)?;
    let corpus = Corpus::open(&opts.corpus)?;
    let vocab = Vocabulary::new(corpus.grid());
    let pages = load_pages(&corpus, &opts.split, opts.limit)?;
    if pages.is_empty() {
        return Err(TrainError::EmptySplit { split: opts.split.clone() }.into());
    }
    let validation = if config.validation_pages > 0 {
        load_pages(&corpus, &opts.validation_split, Some(config.validation_pages))?
    } else {
        Vec::new()
    };
    let mut outputs = Outputs::new();
    outputs.claim(&opts.out);
    let trainer = Trainer {
        config: &config,
        source: BatchSource { pages: &pages, vocab: &vocab, scheme: config.scheme, find_it_words: config.find_it_words, seed: config.seed },
        validation: &validation,
        out_dir: Some(&opts.out),
    };
    let state_path = opts.out.join(STATE_FILE);
    let mut state = if opts.resume && state_path.exists() {
        let state = TrainState::load(&state_path)?;
        if state.model.vocab().hash() != vocab.hash() {
            return Err(Error::Config("saved state was trained on a different grid".into()));
        }
        state
    } else {
        trainer.init_state()?
    };
    let outcome = match trainer.run(&mut state, opts.pause_at, on_log) {
        Ok(o) => o,
        Err(e @ TrainError::NonFiniteLoss { .. }) => {
            // Earlier stage checkpoints stay for inspection.
            outputs.commit();
            return Err(e.into());
        }
        Err(e) => return Err(e.into()),
    };
    outputs.commit();
    Ok(TrainSummary {
        outcome: match outcome {
            RunOutcome::Finished => "finished".into(),
            RunOutcome::Paused => "paused".into(),
        },
        global_step: state.global_step,
        stages: state.history.clone(),
        best: state.best.clone(),
    })
}

#[derive(Debug, Clone)]
pub struct EvalCommand {
    /// `None` scores ground-truth answers, which gives the metric ceiling.
    pub checkpoint: Option<PathBuf>,
    pub corpus: PathBuf,
    pub split: String,
    pub limit: Option<usize>,
    pub tasks: Vec<TaskKind>,
    /// Metric report JSON.
    pub out: PathBuf,
    /// Per-sample JSONL dump.
    pub dump: Option<PathBuf>,
}

pub fn eval(cmd: &EvalCommand) -> Result<EvalReport, Error> {
    let corpus = Corpus::open(&cmd.corpus)?;
    let vocab = Vocabulary::new(corpus.grid());
    let predictor: Box<dyn Predictor> = match &cmd.checkpoint {
        Some(path) => {
            Box::new(checkpoint::load_expecting(path, &vocab)?)
        }
        None => Box::new(OraclePredictor { vocab, scheme: corpus.meta.config.scheme }),
    };
    let set = EvalSet::from_corpus(&corpus, &cmd.split, cmd.limit)?;
    let mut outputs = Outputs::new();
    let out = outputs.claim(&cmd.out);
    let dump = cmd.dump.as_ref().map(|d| outputs.claim(d));
    let tasks = if cmd.tasks.is_empty() { TaskKind::ALL.to_vec() } else { cmd.tasks.clone() };
    let report = evaluate(predictor.as_ref(), &set, &EvalOptions { tasks, dump })?;
    write_json(&out, &report)?;
    outputs.commit();
    Ok(report)
}

#[derive(Debug, Clone)]
pub struct AblationOptions {
    /// Training recipe shared by every arm.
    pub config: Option<PathBuf>,
    pub corpus: PathBuf,
    pub train_split: String,
    pub eval_split: String,
    pub train_limit: Option<usize>,
    pub eval_limit: Option<usize>,
    pub out: PathBuf,
}

pub fn ablate_encodings_cmd(opts: &AblationOptions) -> Result<SchemeTable, Error> {
    let path = opts.config.as_ref().ok_or_else(|| Error::Config("ablate-encodings needs --config".into()))?;
    let config = TrainConfig::load(path)?;
    let corpus = Corpus::open(&opts.corpus)?;
    let vocab = Vocabulary::new(corpus.grid());
    let train = load_pages(&corpus, &opts.train_split, opts.train_limit)?;
    let eval = EvalSet::from_corpus(&corpus, &opts.eval_split, opts.eval_limit)?;
    let mut outputs = Outputs::new();
    let out = outputs.claim(&opts.out);
    let table = ablate_encodings(&config, &vocab, &train, &eval)?;
    write_json(&out, &table)?;
    outputs.commit();
    Ok(table)
}

pub const DEFAULT_GRID_STEPS: [u32; 3] = [10, 5, 3];

/// Quantization error per step on the evaluation pages; with a config,
/// also trains and scores one model per step.
pub fn ablate_grid_cmd(opts: &AblationOptions, steps: &[u32]) -> Result<Vec<GridRow>, Error> {
    let corpus = Corpus::open(&opts.corpus)?;
    let eval = EvalSet::from_corpus(&corpus, &opts.eval_split, opts.eval_limit)?;
    let extent = (
        eval.pages.iter().map(|p| p.width as u32).max().unwrap_or(1),
        eval.pages.iter().map(|p| p.height as u32).max().unwrap_or(1),
    );
    let config = opts.config.as_ref().map(|p| TrainConfig::load(p)).transpose()?;
    let train = match &config {
        Some(_) => load_pages(&corpus, &opts.train_split, opts.train_limit)?,
        None => Vec::new(),
    };
    let mut outputs = Outputs::new();
    let out = outputs.claim(&opts.out);
    let rows = ablate_grid(steps, extent, &eval.pages, config.as_ref().map(|c| (c, train.as_slice(), &eval)))?;
    write_json(&out, &rows)?;
    outputs.commit();
    Ok(rows)
}

#[derive(Debug, Clone)]
pub struct InferOptions {
    pub checkpoint: PathBuf,
    pub images: Vec<PathBuf>,
    pub task: ServiceTask,
    pub region: Option<[u32; 4]>,
    pub query: Option<String>,
    pub pad: Option<f64>,
    pub out: PathBuf,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct InferRow {
    pub image: String,
    #[serde(flatten)]
    pub response: InferenceResponse,
}

/// Runs one request per image and writes one JSON line per image.
pub fn infer(opts: &InferOptions) -> Result<Vec<InferRow>, Error> {
    let engine = Engine::load(&opts.checkpoint)?;
    let mut outputs = Outputs::new();
    let out = outputs.claim(&opts.out);
    let mut w = std::io::BufWriter::new(fs::File::create(&out).map_err(|e| Error::io(&out, e))?);
    let mut rows = Vec::new();
    for path in &opts.images {
        let png = fs::read(path).map_err(|e| Error::io(path, e))?;
        let mut req = InferenceRequest::new(&png, opts.task);
        req.region = opts.region;
        req.query = opts.query.clone();
        let response = engine.infer(&req, opts.pad)?;
        let row = InferRow { image: path.display().to_string(), response };
        writeln!(w, "{}", serde_json::to_string(&row)?).map_err(|e| Error::io(&out, e))?;
        rows.push(row);
    }
    w.flush().map_err(|e| Error::io(&out, e))?;
    drop(w);
    outputs.commit();
    Ok(rows)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ProbeReport {
    pub checkpoint: String,
    pub continuity: ContinuityReport,
}

/// Location-embedding continuity of each checkpoint, keyed by path.
pub fn probe_embeddings(checkpoints: &[PathBuf], out: Option<&Path>) -> Result<BTreeMap<String, ProbeReport>, Error> {
    let mut reports = BTreeMap::new();
    for path in checkpoints {
        let engine = Engine::load(path)?;
        reports.insert(
            path.display().to_string(),
            ProbeReport { checkpoint: engine.checkpoint_hash().to_string(), continuity: location_embedding_continuity(engine.model()) },
        );
    }
    if let Some(out) = out {
        let mut outputs = Outputs::new();
        let out = outputs.claim(out);
        write_json(&out, &reports)?;
        outputs.commit();
    }
    Ok(reports)
}
