//! Per-sample losses and gradients.

use super::{ScoreSource, TrainConfig};
use crate::error::{FluxError, Result};
use crate::fluxvit::{bind, embed_pool, forward, Bound, FluxViTParams};
use crate::sampling::{patchify, SamplingGrid, TokenPool};
use crate::selector::{dynamic_scores, nested_masks, select_group_dynamic, student_mask, NormOrder, SelectionMask};
use crate::tensor::{Graph, Tensor, Var};
use crate::videogen::VideoSample;

/// Loss terms of one sample and the gradient for every parameter tensor.
#[derive(Debug, Clone)]
pub struct SampleResult {
    pub total: f64,
    pub ce: Vec<f64>,
    pub sd: Option<f64>,
    pub align: Vec<f64>,
    pub correct: Vec<bool>,
    pub grads: Vec<Tensor>,
}

/// Dynamic scores of every token in the pool.
pub fn token_scores(params: &FluxViTParams, pool: &TokenPool, source: ScoreSource, p: NormOrder) -> Result<Vec<f64>> {
    let s = match source {
        ScoreSource::Embedded => dynamic_scores(&embed_pool(params, pool)?, &pool.grid, p)?,
        ScoreSource::Raw => dynamic_scores(&pool.features, &pool.grid, p)?,
    };
    Ok(s.scores)
}

/// Smooth-L1 between the L2-normalized (optionally projected) student rows
/// and the L2-normalized teacher rows, averaged over rows and channels.
pub fn align_loss(g: &mut Graph, student: Var, teacher: Var, projection: Option<(Var, Var)>, beta: f64) -> Result<Var> {
    if g.value(student).rows() == 0 {
        return Err(FluxError::InvalidInput("alignment over zero tokens".into()));
    }
    let s = match projection {
        Some((w, b)) => {
            let y = g.matmul(student, w)?;
            g.add(y, b)?
        }
        None => student,
    };
    let s = g.l2_normalize(s);
    let t = g.l2_normalize(teacher);
    g.smooth_l1(s, t, beta)
}

fn collect_grads(g: &Graph, b: &Bound, loss: Var) -> Result<Vec<Tensor>> {
    let mut grads = g.backward(loss)?;
    b.vars()
        .iter()
        .map(|&v| {
            let t = grads.take(v).unwrap_or_else(|| Tensor::zeros(g.value(v).shape()));
            if t.is_finite() {
                Ok(t)
            } else {
                Err(FluxError::NonFinite("gradient"))
            }
        })
        .collect()
}

fn add_all(g: &mut Graph, terms: &[Var]) -> Result<Var> {
    let mut acc = terms[0];
    for &t in &terms[1..] {
        acc = g.add(acc, t)?;
    }
    Ok(acc)
}

fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// Masks and pool sizes seen by one pre-training sample.
#[derive(Debug, Clone)]
pub struct PtTrace {
    pub grid: SamplingGrid,
    pub teacher_mask: SelectionMask,
    pub student_masks: Vec<SelectionMask>,
}

/// Teacher picks `teacher_k` tokens by group-dynamic selection and encodes
/// them; for each student count the student sees the teacher tokens with the
/// highest CLS attention and regresses the teacher features at those
/// positions. The loss is the mean over counts; the teacher is frozen.
pub fn pt_sample(
    student: &FluxViTParams,
    teacher: &FluxViTParams,
    video: &VideoSample,
    grid: &SamplingGrid,
    cfg: &TrainConfig,
) -> Result<(SampleResult, PtTrace)> {
    let pool = patchify(video, grid)?;
    if pool.len() < cfg.teacher_k {
        return Err(FluxError::Selection(format!(
            "pool of {} tokens cannot supply the teacher's {}",
            pool.len(),
            cfg.teacher_k
        )));
    }
    let scores = token_scores(teacher, &pool, cfg.score_source, cfg.norm()?)?;
    let teacher_mask = select_group_dynamic(&scores, grid, cfg.teacher_k, cfg.groups)?;

    let (teacher_tokens, cls_attn) = {
        let mut tg = Graph::new();
        let tb = bind(&mut tg, teacher, false);
        let out = forward(&mut tg, &tb, &teacher.config, &pool, &teacher_mask)?;
        (tg.value(out.tokens).clone(), out.cls_attn)
    };

    let mut g = Graph::new();
    let b = bind(&mut g, student, true);
    let proj = (b.get("align.weight")?, b.get("align.bias")?);
    let mut terms = Vec::new();
    let mut student_masks = Vec::new();
    for &k in cfg.active_counts() {
        let smask = student_mask(&teacher_mask, &cls_attn, k)?;
        let positions: Vec<usize> = teacher_mask
            .indices
            .iter()
            .enumerate()
            .filter(|(_, i)| smask.contains(**i))
            .map(|(j, _)| j)
            .collect();
        let target = g.constant(teacher_tokens.gather_rows(&positions)?);
        let out = forward(&mut g, &b, &student.config, &pool, &smask)?;
        terms.push(align_loss(&mut g, out.tokens, target, Some(proj), cfg.smooth_l1_beta)?);
        student_masks.push(smask);
    }
    let sum = add_all(&mut g, &terms)?;
    let total = g.scale(sum, 1.0 / terms.len() as f64);
    let align = terms.iter().map(|&t| g.value(t).item()).collect();
    let grads = collect_grads(&g, &b, total)?;
    Ok((
        SampleResult {
            total: g.value(total).item(),
            ce: Vec::new(),
            sd: None,
            align,
            correct: Vec::new(),
            grads,
        },
        PtTrace {
            grid: *grid,
            teacher_mask,
            student_masks,
        },
    ))
}

/// Graph handles of the fine-tuning loss.
pub struct FtLoss {
    pub total: Var,
    pub ce: Vec<Var>,
    pub sd: Option<Var>,
    pub features: Vec<Var>,
    pub logits: Vec<Var>,
}

/// `Σ CE(logits_j, label) + λ·Σ SL1(feat_{j+1}, stopgrad(feat_j))` over masks
/// ordered from the most tokens to the fewest.
pub fn ft_loss(
    g: &mut Graph,
    b: &Bound,
    params: &FluxViTParams,
    pool: &TokenPool,
    masks: &[SelectionMask],
    label: usize,
    cfg: &TrainConfig,
) -> Result<FtLoss> {
    let mut ce = Vec::new();
    let mut features = Vec::new();
    let mut logits = Vec::new();
    for mask in masks {
        let out = forward(g, b, &params.config, pool, mask)?;
        ce.push(g.cross_entropy(out.logits, &[label])?);
        features.push(out.features);
        logits.push(out.logits);
    }
    if masks.is_empty() {
        return Err(FluxError::Selection("no masks to train on".into()));
    }
    let mut total = add_all(g, &ce)?;
    let mut sd = None;
    if features.len() > 1 {
        let mut terms = Vec::new();
        for w in features.windows(2) {
            let target = g.detach(w[0]);
            terms.push(g.smooth_l1(w[1], target, cfg.smooth_l1_beta)?);
        }
        let s = add_all(g, &terms)?;
        let weighted = g.scale(s, cfg.lambda);
        total = g.add(total, weighted)?;
        sd = Some(s);
    }
    Ok(FtLoss {
        total,
        ce,
        sd,
        features,
        logits,
    })
}

/// Fine-tuning on one sample: nested group-dynamic masks for the trained
/// counts (one score ordering), forward each, CE plus self-distillation.
pub fn ft_sample(params: &FluxViTParams, video: &VideoSample, grid: &SamplingGrid, cfg: &TrainConfig) -> Result<SampleResult> {
    let pool = patchify(video, grid)?;
    let scores = token_scores(params, &pool, cfg.score_source, cfg.norm()?)?;
    let masks = if cfg.multi {
        nested_masks(&scores, grid, &cfg.counts, cfg.groups)?
    } else {
        vec![select_group_dynamic(&scores, grid, cfg.counts[0], cfg.groups)?]
    };
    let mut g = Graph::new();
    let b = bind(&mut g, params, true);
    let loss = ft_loss(&mut g, &b, params, &pool, &masks, video.label, cfg)?;
    let grads = collect_grads(&g, &b, loss.total)?;
    Ok(SampleResult {
        total: g.value(loss.total).item(),
        ce: loss.ce.iter().map(|&v| g.value(v).item()).collect(),
        sd: loss.sd.map(|v| g.value(v).item()),
        align: Vec::new(),
        correct: loss.logits.iter().map(|&l| argmax(g.value(l).data()) == video.label).collect(),
        grads,
    })
}
