//! The staged training loop.

use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use textloc_model::{checkpoint, Model, ModelError};

use crate::config::TrainConfig;
use crate::data::{BatchSource, Page};
use crate::error::TrainError;
use crate::eval::text_cer;
use crate::optim::clip_grad_norm;
use crate::state::{write_atomic, BestSnapshot, IntervalAcc, StageReport, TrainState};

/// One metrics-log row: mean losses over a logging interval.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LogRow {
    /// Global step count at the end of the interval.
    pub step: usize,
    /// 1-based stage number.
    pub stage: usize,
    pub total: f64,
    pub text_ce: f64,
    pub loc_ce: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RunOutcome {
    Finished,
    /// Stopped at the requested global step; the state can be resumed.
    Paused,
}

pub const STATE_FILE: &str = "state.ckpt";
pub const LOG_FILE: &str = "train_log.jsonl";
pub const BEST_FILE: &str = "best.ckpt";

/// Model checkpoint written at the end of stage `n` (1-based; 0 is the
/// initialization).
pub fn stage_checkpoint(dir: &Path, n: usize) -> PathBuf {
    dir.join(format!("stage{n}.ckpt"))
}

pub struct Trainer<'a> {
    pub config: &'a TrainConfig,
    pub source: BatchSource<'a>,
    /// Pages scored with text-only CER after every stage.
    pub validation: &'a [Page],
    /// Where checkpoints and the log go; `None` keeps everything in memory.
    pub out_dir: Option<&'a Path>,
}

impl<'a> Trainer<'a> {
    /// Fresh state with the configured architecture.
    pub fn init_state(&self) -> Result<TrainState, TrainError> {
        self.config.validate()?;
        let cfg = self.config.model.config(self.source.vocab, self.config.scheme);
        Ok(TrainState::new(Model::new(cfg, self.source.vocab.clone())?, self.config.seed))
    }

    fn last_good(&self, state: &TrainState) -> PathBuf {
        match self.out_dir {
            Some(dir) => stage_checkpoint(dir, state.stage),
            None => PathBuf::new(),
        }
    }

    fn append_log(&self, row: &LogRow) -> Result<(), TrainError> {
        if let Some(dir) = self.out_dir {
            let path = dir.join(LOG_FILE);
            let mut f = OpenOptions::new().create(true).append(true).open(&path).map_err(|e| TrainError::io(&path, e))?;
            let line = serde_json::to_string(row)?;
            writeln!(f, "{line}").map_err(|e| TrainError::io(&path, e))?;
        }
        Ok(())
    }

    fn flush_interval(&self, state: &mut TrainState, on_log: &mut dyn FnMut(&LogRow)) -> Result<Option<LogRow>, TrainError> {
        let acc = std::mem::take(&mut state.interval);
        if acc.steps == 0 {
            return Ok(None);
        }
        let n = acc.steps as f64;
        let row = LogRow {
            step: state.global_step,
            stage: state.stage + 1,
            total: acc.total / n,
            text_ce: acc.text_ce / n,
            loc_ce: acc.loc_ce / n,
        };
        self.append_log(&row)?;
        on_log(&row);
        Ok(Some(row))
    }

    /// Trains from `state` until the plan is done or `pause_at` global
    /// steps have been taken. Every completed interval is passed to `on_log`
    /// (and appended to the log file).
    pub fn run(
        &self,
        state: &mut TrainState,
        pause_at: Option<usize>,
        on_log: &mut dyn FnMut(&LogRow),
    ) -> Result<RunOutcome, TrainError> {
        self.config.validate()?;
        let plan = &self.config.plan;
        if let Some(dir) = self.out_dir {
            fs::create_dir_all(dir).map_err(|e| TrainError::io(dir, e))?;
            if state.global_step == 0 && state.stage == 0 {
                checkpoint::save(&state.model, &stage_checkpoint(dir, 0))?;
            }
        }
        let shapes: Vec<usize> = state.model.params().iter().map(Vec::len).collect();
        let mut grads: Vec<Vec<f32>> = shapes.iter().map(|&n| vec![0.0; n]).collect();
        let decays: Vec<bool> = state.model.param_specs().iter().map(|s| s.decays()).collect();
        let mut last_row: Option<LogRow> = None;
        while state.stage < plan.stages.len() {
            let stage = &plan.stages[state.stage];
            if state.step >= stage.steps {
                if let Some(row) = self.flush_interval(state, on_log)? {
                    last_row = Some(row);
                }
                self.finish_stage(state, last_row.map_or(f64::NAN, |r| r.total))?;
                continue;
            }
            if pause_at.is_some_and(|p| state.global_step >= p) {
                if let Some(dir) = self.out_dir {
                    state.save(&dir.join(STATE_FILE))?;
                }
                return Ok(RunOutcome::Paused);
            }
            let trainable = state.model.group_mask(&stage.groups);
            let batch = self.source.batch(state.stage, state.step, stage.task_mix, stage.batch_size)?;
            grads.iter_mut().for_each(|g| g.iter_mut().for_each(|x| *x = 0.0));
            let mut drng = ChaCha8Rng::seed_from_u64(self.source.dropout_seed(state.stage, state.step));
            let dropout = (state.model.config().dropout > 0.0).then_some(&mut drng);
            let loss = match state.model.loss_and_grad(&batch, stage.lambda, &trainable, Some(&mut grads), dropout) {
                Ok(l) => l,
                Err(ModelError::NonFiniteLoss { .. }) => {
                    return Err(TrainError::NonFiniteLoss { stage: state.stage + 1, step: state.step, last_good: self.last_good(state) });
                }
                Err(e) => return Err(e.into()),
            };
            let norm = clip_grad_norm(&mut grads, &trainable, stage.clip_norm);
            if !norm.is_finite() {
                return Err(TrainError::NonFiniteLoss { stage: state.stage + 1, step: state.step, last_good: self.last_good(state) });
            }
            let lr = stage.schedule.lr_at(state.step, stage.steps);
            state.optimizer.step(state.model.params_mut(), &grads, &trainable, &decays, lr, stage.weight_decay);
            state.step += 1;
            state.global_step += 1;
            state.interval = IntervalAcc {
                steps: state.interval.steps + 1,
                total: state.interval.total + loss.total,
                text_ce: state.interval.text_ce + loss.text_ce,
                loc_ce: state.interval.loc_ce + loss.loc_ce,
            };
            if state.global_step % self.config.log_every == 0 {
                if let Some(row) = self.flush_interval(state, on_log)? {
                    last_row = Some(row);
                }
            }
        }
        Ok(RunOutcome::Finished)
    }

    fn finish_stage(&self, state: &mut TrainState, final_loss: f64) -> Result<(), TrainError> {
        let n = state.stage + 1;
        let stage = &self.config.plan.stages[state.stage];
        let validation_cer = if self.validation.is_empty() {
            None
        } else {
            Some(text_cer(&state.model, self.validation)?)
        };
        let improved = match (validation_cer, state.best) {
            (Some(c), Some(b)) => c < b.validation_cer,
            (Some(_), None) => true,
            _ => false,
        };
        if improved {
            state.best = Some(BestSnapshot { stage: n, global_step: state.global_step, validation_cer: validation_cer.expect("checked") });
        }
        log::info!("stage {n} ({}) done at step {}: loss {final_loss:.4}, validation CER {validation_cer:?}", stage.name, state.global_step);
        state.history.push(StageReport { stage: n, name: stage.name.clone(), steps: stage.steps, final_loss, validation_cer });
        state.stage += 1;
        state.step = 0;
        if let Some(dir) = self.out_dir {
            let bytes = checkpoint::to_bytes(&state.model)?;
            write_atomic(&stage_checkpoint(dir, n), &bytes)?;
            if improved {
                write_atomic(&dir.join(BEST_FILE), &bytes)?;
            }
            state.save(&dir.join(STATE_FILE))?;
        }
        Ok(())
    }
}
