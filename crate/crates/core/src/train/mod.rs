//! Training: masked teacher-student alignment pre-training and supervised
//! multi-token-count fine-tuning with self-distillation.

mod metrics;
mod optim;
mod run;
mod steps;

pub use metrics::{MetricsLog, StepRecord, CSV_HEADER};
pub use optim::{lr_at, AdamW};
pub use run::{evaluate, evaluate_on_grid, grid_accuracy, train, CountEval, Mode, TrainHooks, TrainOutcome};
pub use steps::{align_loss, ft_loss, ft_sample, pt_sample, token_scores, FtLoss, PtTrace, SampleResult};

use serde::{Deserialize, Serialize};

use crate::error::{invalid_config, Result};
use crate::selector::NormOrder;

/// What the dynamic scores of the teacher-side selector are computed on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScoreSource {
    /// Tokens after the dual patch normalization embedding.
    Embedded,
    /// Raw patch pixels.
    Raw,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub warmup_frac: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    /// Global gradient-norm clip; 0 disables.
    pub grad_clip: f64,
    /// Student token counts, largest first.
    pub counts: [usize; 3],
    /// Teacher token count (pre-training).
    pub teacher_k: usize,
    pub groups: usize,
    pub norm_p: u32,
    pub smooth_l1_beta: f64,
    pub lambda: f64,
    /// Train all three counts; otherwise only the largest.
    pub multi: bool,
    pub score_source: ScoreSource,
    pub eval_every: usize,
    pub eval_frames: usize,
    pub eval_resolution: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 300,
            batch_size: 8,
            lr: 1e-3,
            warmup_frac: 0.1,
            weight_decay: 0.05,
            beta1: 0.9,
            beta2: 0.98,
            adam_eps: 1e-8,
            grad_clip: 1.0,
            counts: [32, 16, 8],
            teacher_k: 32,
            groups: 4,
            norm_p: 2,
            smooth_l1_beta: 1.0,
            lambda: 1.0,
            multi: true,
            score_source: ScoreSource::Raw,
            eval_every: 100,
            eval_frames: 8,
            eval_resolution: 56,
        }
    }
}

impl TrainConfig {
    pub fn norm(&self) -> Result<NormOrder> {
        NormOrder::from_p(self.norm_p).map_err(|e| invalid_config(format!("train: {e}")))
    }

    /// Counts actually trained: all three, or only the largest.
    pub fn active_counts(&self) -> &[usize] {
        if self.multi {
            &self.counts
        } else {
            &self.counts[..1]
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.norm()?;
        let [k1, k2, k3] = self.counts;
        if k3 == 0 || !(k3 <= k2 && k2 <= k1) {
            return Err(invalid_config(format!(
                "train: counts must satisfy 0 < K3 <= K2 <= K1, got {:?}",
                self.counts
            )));
        }
        if self.batch_size == 0 {
            return Err(invalid_config("train: batch_size must be positive"));
        }
        if self.groups == 0 {
            return Err(invalid_config("train: groups must be positive"));
        }
        if !(self.lambda >= 0.0) || !(self.smooth_l1_beta > 0.0) {
            return Err(invalid_config("train: need lambda >= 0 and smooth_l1_beta > 0"));
        }
        if !(self.lr > 0.0) || !(0.0..=1.0).contains(&self.warmup_frac) || !(self.weight_decay >= 0.0) {
            return Err(invalid_config("train: need lr > 0, warmup_frac in [0,1], weight_decay >= 0"));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || !(self.adam_eps > 0.0) {
            return Err(invalid_config("train: need beta1, beta2 in [0,1) and adam_eps > 0"));
        }
        if !(self.grad_clip >= 0.0) {
            return Err(invalid_config("train: grad_clip must be >= 0"));
        }
        Ok(())
    }

    /// Checks counts against the smallest pool the sampler can produce.
    pub fn validate_against_pool(&self, min_pool: usize, pretraining: bool) -> Result<()> {
        let top = if pretraining { self.teacher_k } else { self.counts[0] };
        if pretraining && self.counts[0] > self.teacher_k {
            return Err(invalid_config(format!(
                "train: K1={} exceeds teacher_k={}",
                self.counts[0], self.teacher_k
            )));
        }
        if top > min_pool {
            return Err(invalid_config(format!(
                "train: token count {top} exceeds the smallest sampled pool {min_pool}"
            )));
        }
        if !pretraining && self.multi {
            if let Some(c) = self.counts.iter().find(|&&c| c % self.groups != 0) {
                return Err(invalid_config(format!(
                    "train: count {c} not divisible by {} groups, nested masks impossible",
                    self.groups
                )));
            }
        }
        Ok(())
    }
}

/// Worker count: `FLUX_NUM_THREADS` if set, else the available parallelism.
pub fn thread_cap() -> usize {
    std::env::var("FLUX_NUM_THREADS")
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .filter(|&n| n > 0)
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()))
}

/// Order-preserving parallel map over at most `threads` scoped workers.
pub(crate) fn par_map<T: Sync, R: Send>(items: &[T], threads: usize, f: impl Fn(&T) -> R + Sync) -> Vec<R> {
    let threads = threads.clamp(1, items.len().max(1));
    if threads == 1 {
        return items.iter().map(f).collect();
    }
    let chunk = items.len().div_ceil(threads);
    std::thread::scope(|s| {
        let handles: Vec<_> = items
            .chunks(chunk)
            .map(|c| {
                let f = &f;
                s.spawn(move || c.iter().map(f).collect::<Vec<R>>())
            })
            .collect();
        handles
            .into_iter()
            .flat_map(|h| h.join().expect("worker panicked"))
            .collect()
    })
}
