//! The training loop and count-wise evaluation.

use std::path::PathBuf;
use std::sync::atomic::{AtomicBool, Ordering};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::steps::{ft_sample, pt_sample, token_scores, PtTrace, SampleResult};
use super::{lr_at, par_map, AdamW, MetricsLog, StepRecord, TrainConfig};
use crate::error::{invalid_config, FluxError, Result};
use crate::fluxvit::{bind, forward, save_checkpoint, FluxViTParams};
use crate::rng::rng_for;
use crate::sampling::{candidates, patchify, sample_grid, SamplerConfig, SamplingGrid};
use crate::selector::select_group_dynamic;
use crate::tensor::{Graph, Tensor};
use crate::videogen::VideoSample;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Pretrain,
    Finetune,
}

/// Side channels of a run: parallelism, where to checkpoint, and a stop flag.
#[derive(Debug, Default)]
pub struct TrainHooks<'a> {
    pub threads: usize,
    /// Written on success, on a non-finite abort (last good parameters) and
    /// on interruption.
    pub checkpoint: Option<PathBuf>,
    pub stop: Option<&'a AtomicBool>,
    pub config_hash: String,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub params: FluxViTParams,
    pub log: MetricsLog,
    /// Teacher token count per pre-training sample, in processing order.
    pub teacher_counts: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CountEval {
    pub count: usize,
    pub accuracy: f64,
    pub mean_ce: f64,
}

fn save(hooks: &TrainHooks, params: &FluxViTParams) -> Result<()> {
    if let Some(path) = &hooks.checkpoint {
        save_checkpoint(path, params)?;
    }
    Ok(())
}

fn check_pretrain_trace(trace: &PtTrace, cfg: &TrainConfig) -> Result<()> {
    if trace.teacher_mask.k() != cfg.teacher_k {
        return Err(FluxError::Selection(format!(
            "teacher saw {} tokens instead of {}",
            trace.teacher_mask.k(),
            cfg.teacher_k
        )));
    }
    if !trace.student_masks.iter().all(|m| m.is_subset_of(&trace.teacher_mask)) {
        return Err(FluxError::Selection("student mask escaped the teacher mask".into()));
    }
    Ok(())
}

/// Runs `cfg.steps` optimizer steps from `init`.
#[allow(clippy::too_many_arguments)]
pub fn train(
    mode: Mode,
    cfg: &TrainConfig,
    sampler: &SamplerConfig,
    init: FluxViTParams,
    teacher: Option<&FluxViTParams>,
    data: &[VideoSample],
    eval_data: &[VideoSample],
    seed: u64,
    hooks: &TrainHooks,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    init.config.validate()?;
    let min_pool = candidates(sampler)?.iter().map(|g| g.pool).min().expect("validated nonempty");
    cfg.validate_against_pool(min_pool, mode == Mode::Pretrain)?;
    if data.is_empty() && cfg.steps > 0 {
        return Err(invalid_config("train: no training samples"));
    }
    let teacher = match (mode, teacher) {
        (Mode::Pretrain, None) => return Err(invalid_config("pretrain: a teacher model is required")),
        (Mode::Pretrain, Some(t)) => {
            if t.config.d_model != init.config.proj_dim {
                return Err(invalid_config(format!(
                    "pretrain: student proj_dim {} must equal teacher d_model {}",
                    init.config.proj_dim, t.config.d_model
                )));
            }
            Some(t)
        }
        (Mode::Finetune, _) => None,
    };

    let threads = hooks.threads.max(1);
    let mut params = init;
    let mut opt = AdamW::new(&params.set);
    let mut log = MetricsLog::new(seed, hooks.config_hash.clone());
    let mut teacher_counts = Vec::new();
    let mut order_rng = rng_for(seed, "train.order");
    let mut grid_rng = rng_for(seed, "train.grids");
    let mut order: Vec<usize> = Vec::new();
    let started = Instant::now();

    for step in 0..cfg.steps {
        if hooks.stop.is_some_and(|s| s.load(Ordering::SeqCst)) {
            save(hooks, &params)?;
            return Err(FluxError::Interrupted);
        }
        let mut batch = Vec::with_capacity(cfg.batch_size);
        for _ in 0..cfg.batch_size {
            if order.is_empty() {
                order = (0..data.len()).collect();
                order.shuffle(&mut order_rng);
            }
            let idx = order.pop().expect("refilled");
            batch.push((idx, sample_grid(grid_rng.random::<u64>(), sampler)?));
        }

        let results: Vec<Result<(SampleResult, Option<PtTrace>)>> = par_map(&batch, threads, |(idx, grid)| {
            let video = &data[*idx];
            match teacher {
                Some(t) => pt_sample(&params, t, video, grid, cfg).map(|(r, tr)| (r, Some(tr))),
                None => ft_sample(&params, video, grid, cfg).map(|r| (r, None)),
            }
        });

        let abort = |params: &FluxViTParams, reason: String| -> Result<TrainOutcome> {
            save(hooks, params)?;
            Err(FluxError::TrainingAborted { step, reason })
        };
        let mut samples = Vec::with_capacity(results.len());
        for r in results {
            match r {
                Ok(v) => samples.push(v),
                Err(FluxError::NonFinite(what)) => return abort(&params, format!("non-finite {what}")),
                Err(e) => return Err(e),
            }
        }

        let n = samples.len() as f64;
        let mut grads: Vec<Tensor> = params.set.tensors().iter().map(|t| Tensor::zeros(t.shape())).collect();
        let mut total = 0.0;
        let n_terms = cfg.active_counts().len();
        let mut ce = vec![0.0; if teacher.is_none() { n_terms } else { 0 }];
        let mut align = vec![0.0; if teacher.is_some() { n_terms } else { 0 }];
        let mut sd: Option<f64> = None;
        for (s, trace) in &samples {
            if let Some(tr) = trace {
                check_pretrain_trace(tr, cfg)?;
                teacher_counts.push(tr.teacher_mask.k());
            }
            for (acc, g) in grads.iter_mut().zip(&s.grads) {
                for (a, b) in acc.data_mut().iter_mut().zip(g.data()) {
                    *a += b / n;
                }
            }
            total += s.total / n;
            for (a, v) in ce.iter_mut().zip(&s.ce) {
                *a += v / n;
            }
            for (a, v) in align.iter_mut().zip(&s.align) {
                *a += v / n;
            }
            if let Some(v) = s.sd {
                *sd.get_or_insert(0.0) += v / n;
            }
        }
        if !total.is_finite() {
            return abort(&params, "non-finite loss".into());
        }

        if cfg.grad_clip > 0.0 {
            let norm = grads.iter().map(|g| g.data().iter().map(|v| v * v).sum::<f64>()).sum::<f64>().sqrt();
            if norm > cfg.grad_clip {
                let s = cfg.grad_clip / norm;
                for g in &mut grads {
                    g.data_mut().iter_mut().for_each(|v| *v *= s);
                }
            }
        }
        let lr = lr_at(cfg, step);
        let before = params.clone();
        opt.step(&mut params.set, &grads, lr, cfg);
        if !params.set.is_finite() {
            return abort(&before, "non-finite parameters after update".into());
        }

        let done = step + 1;
        let acc = if !eval_data.is_empty() && cfg.eval_every > 0 && (done % cfg.eval_every == 0 || done == cfg.steps) {
            evaluate(&params, eval_data, &cfg.counts, cfg, threads)?
                .iter()
                .map(|e| e.accuracy)
                .collect()
        } else {
            Vec::new()
        };
        log.push(StepRecord {
            step: done,
            total_loss: total,
            ce,
            sd_loss: sd,
            align,
            acc,
            lr,
            wall_ms: started.elapsed().as_millis(),
        })?;
    }
    save(hooks, &params)?;
    Ok(TrainOutcome {
        params,
        log,
        teacher_counts,
    })
}

/// Accuracy and mean CE per token count on a fixed grid, selecting tokens by
/// group-dynamic selection with the training config's groups and norm.
pub fn evaluate_on_grid(
    params: &FluxViTParams,
    samples: &[VideoSample],
    grid: &SamplingGrid,
    counts: &[usize],
    cfg: &TrainConfig,
    threads: usize,
) -> Result<Vec<CountEval>> {
    if samples.is_empty() {
        return Err(FluxError::InvalidInput("evaluation over zero samples".into()));
    }
    if let Some(&k) = counts.iter().find(|&&k| k == 0 || k > grid.pool) {
        return Err(FluxError::InvalidInput(format!(
            "count {k} outside 1..={} for grid {}x{}",
            grid.pool, grid.frames, grid.resolution
        )));
    }
    let p = cfg.norm()?;
    let per_sample: Vec<Result<Vec<(bool, f64)>>> = par_map(samples, threads, |video| {
        let pool = patchify(video, grid)?;
        let scores = token_scores(params, &pool, cfg.score_source, p)?;
        counts
            .iter()
            .map(|&k| {
                let mask = select_group_dynamic(&scores, grid, k, cfg.groups.min(grid.t))?;
                let mut g = Graph::new();
                let b = bind(&mut g, params, false);
                let out = forward(&mut g, &b, &params.config, &pool, &mask)?;
                let ce = g.cross_entropy(out.logits, &[video.label])?;
                let logits = g.value(out.logits).data();
                let pred = (0..logits.len()).fold(0, |best, i| if logits[i] > logits[best] { i } else { best });
                Ok((pred == video.label, g.value(ce).item()))
            })
            .collect()
    });
    let mut hits = vec![0usize; counts.len()];
    let mut ce = vec![0.0; counts.len()];
    for r in per_sample {
        for (j, (hit, l)) in r?.into_iter().enumerate() {
            hits[j] += usize::from(hit);
            ce[j] += l;
        }
    }
    let n = samples.len() as f64;
    Ok(counts
        .iter()
        .enumerate()
        .map(|(j, &count)| CountEval {
            count,
            accuracy: hits[j] as f64 / n,
            mean_ce: ce[j] / n,
        })
        .collect())
}

/// [`evaluate_on_grid`] on the config's evaluation grid.
pub fn evaluate(
    params: &FluxViTParams,
    samples: &[VideoSample],
    counts: &[usize],
    cfg: &TrainConfig,
    threads: usize,
) -> Result<Vec<CountEval>> {
    let grid = SamplingGrid::new(cfg.eval_frames, cfg.eval_resolution, params.config.patch);
    evaluate_on_grid(params, samples, &grid, counts, cfg, threads)
}

/// Accuracy with `k` tokens at (frames, resolution): the score a
/// token-optimization search maximizes.
pub fn grid_accuracy(
    params: &FluxViTParams,
    samples: &[VideoSample],
    frames: usize,
    resolution: usize,
    k: usize,
    cfg: &TrainConfig,
    threads: usize,
) -> Result<f64> {
    let grid = SamplingGrid::new(frames, resolution, params.config.patch);
    Ok(evaluate_on_grid(params, samples, &grid, &[k], cfg, threads)?[0].accuracy)
}
