//! In-memory pages and on-the-fly construction of prompted samples.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use textloc_core::synthgen::{derive_seed, sample_find_it, sample_read_at, Corpus};
use textloc_core::{encode_prompt, expected_target, EncodingScheme, LineElement, TaskKind, TaskPrompt, Vocabulary};
use textloc_model::{Batch, InkImage, Sample};

use crate::error::TrainError;
use crate::sampler::task_sampler;

/// One page: 8-bit image plus its ordered lines.
#[derive(Debug, Clone, PartialEq)]
pub struct Page {
    pub id: String,
    pub width: usize,
    pub height: usize,
    pub luma: Vec<u8>,
    pub lines: Vec<LineElement>,
}

impl Page {
    pub fn ink(&self) -> InkImage {
        InkImage::from_luma(self.width, self.height, &self.luma).expect("page dimensions match its pixels")
    }
}

/// Loads every page of `split` (optionally the first `limit`).
pub fn load_pages(corpus: &Corpus, split: &str, limit: Option<usize>) -> Result<Vec<Page>, TrainError> {
    let mut manifests = corpus.manifests(split)?;
    if let Some(n) = limit {
        manifests.truncate(n);
    }
    manifests
        .into_iter()
        .map(|m| {
            let img = corpus.load_image(&m)?;
            Ok(Page {
                width: img.width() as usize,
                height: img.height() as usize,
                luma: img.into_raw(),
                id: m.id,
                lines: m.lines,
            })
        })
        .collect()
}

/// Draws a prompt of kind `task` for `page`, or `None` when the page offers
/// no valid one (no unique query, no isolating region).
pub fn sample_prompt(
    page: &Page,
    task: TaskKind,
    vocab: &Vocabulary,
    find_it_words: (usize, usize),
    rng: &mut impl Rng,
) -> Option<TaskPrompt> {
    match task {
        TaskKind::OcrOnly => Some(TaskPrompt::OcrOnly),
        TaskKind::OcrLayout => Some(TaskPrompt::OcrLayout),
        TaskKind::ReadAt => {
            if page.lines.is_empty() {
                return None;
            }
            let li = rng.random_range(0..page.lines.len());
            sample_read_at(&page.lines, li, vocab.grid(), rng).map(TaskPrompt::ReadAt)
        }
        TaskKind::FindIt => sample_find_it(&page.lines, find_it_words.0..=find_it_words.1, rng).map(TaskPrompt::FindIt),
    }
}

pub fn build_sample(page: &Page, prompt: &TaskPrompt, vocab: &Vocabulary, scheme: EncodingScheme) -> Result<Sample, TrainError> {
    Ok(Sample {
        image: page.ink(),
        prompt: encode_prompt(prompt, vocab)?,
        target: expected_target(prompt, &page.lines, vocab, scheme)?,
    })
}

const SAMPLE_ATTEMPTS: usize = 64;

/// Source of training batches; batch `(stage, step)` is a pure function of
/// the seed, so runs and resumed runs see identical data.
#[derive(Debug, Clone)]
pub struct BatchSource<'a> {
    pub pages: &'a [Page],
    pub vocab: &'a Vocabulary,
    pub scheme: EncodingScheme,
    pub find_it_words: (usize, usize),
    pub seed: u64,
}

impl BatchSource<'_> {
    pub fn batch(&self, stage: usize, step: usize, mix: [f64; 4], size: usize) -> Result<Batch, TrainError> {
        if self.pages.is_empty() {
            return Err(TrainError::EmptySplit { split: "train".into() });
        }
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(self.seed, step as u64, 1000 + stage as u64));
        let tasks: Vec<TaskKind> = task_sampler(mix, &mut rng)?.take(size).collect();
        let mut samples = Vec::with_capacity(size);
        for task in tasks {
            samples.push(self.sample(task, &mut rng)?);
        }
        Ok(Batch { samples })
    }

    fn sample(&self, task: TaskKind, rng: &mut ChaCha8Rng) -> Result<Sample, TrainError> {
        for _ in 0..SAMPLE_ATTEMPTS {
            let page = &self.pages[rng.random_range(0..self.pages.len())];
            if let Some(prompt) = sample_prompt(page, task, self.vocab, self.find_it_words, rng) {
                return build_sample(page, &prompt, self.vocab, self.scheme);
            }
        }
        Err(TrainError::NoSample { task: task.to_string(), attempts: SAMPLE_ATTEMPTS })
    }

    /// Seed of the dropout stream for one step.
    pub fn dropout_seed(&self, stage: usize, step: usize) -> u64 {
        derive_seed(self.seed, step as u64, 2000 + stage as u64)
    }
}
