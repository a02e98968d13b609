use rand::Rng;
use textloc_core::TaskKind;

use crate::error::TrainError;

/// Endless i.i.d. stream of tasks drawn from a categorical mix.
#[derive(Debug)]
pub struct TaskSampler<R> {
    cumulative: [f64; 4],
    /// Last task with positive probability, for when rounding leaves the
    /// final bound just under 1.
    last: usize,
    rng: R,
}

/// Samples tasks with probabilities `mix` over `[ocr, ocr_layout, read_at, find_it]`.
pub fn task_sampler<R: Rng>(mix: [f64; 4], rng: R) -> Result<TaskSampler<R>, TrainError> {
    let sum: f64 = mix.iter().sum();
    if (sum - 1.0).abs() > 1e-6 || mix.iter().any(|r| *r < 0.0 || !r.is_finite()) {
        return Err(TrainError::Config(format!("task mix must be non-negative and sum to 1, got {mix:?}")));
    }
    let mut cumulative = [0.0; 4];
    let mut acc = 0.0;
    for (c, r) in cumulative.iter_mut().zip(mix) {
        acc += r / sum;
        *c = acc;
    }
    let last = mix.iter().rposition(|&r| r > 0.0).unwrap_or(0);
    Ok(TaskSampler { cumulative, last, rng })
}

impl<R: Rng> TaskSampler<R> {
    pub fn draw(&mut self) -> TaskKind {
        let u: f64 = self.rng.random();
        let i = self.cumulative.iter().position(|&c| u < c).unwrap_or(self.last);
        TaskKind::ALL[i]
    }
}

impl<R: Rng> Iterator for TaskSampler<R> {
    type Item = TaskKind;

    fn next(&mut self) -> Option<TaskKind> {
        Some(self.draw())
    }
}
