//! Token selection: group-dynamic (teacher side), CLS-attention sub-masks
//! (student side) and the random / tube / global-dynamic baselines.
//!
//! Every selection breaks score ties by ascending token index, and every mask
//! stores its indices sorted ascending.

use std::ops::Range;

use rand::seq::index::sample;
use serde::{Deserialize, Serialize};

use crate::error::{FluxError, Result};
use crate::rng::rng_for;
use crate::sampling::SamplingGrid;
use crate::tensor::Tensor;

/// Ordered set of selected token indices with their temporal groups.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SelectionMask {
    pub indices: Vec<usize>,
    pub group_of: Vec<usize>,
    pub quota: Vec<usize>,
}

impl SelectionMask {
    pub fn k(&self) -> usize {
        self.indices.len()
    }

    pub fn n_groups(&self) -> usize {
        self.quota.len()
    }

    /// Mask over `indices` with a single group.
    pub fn ungrouped(mut indices: Vec<usize>) -> Self {
        indices.sort_unstable();
        let k = indices.len();
        Self {
            group_of: vec![0; k],
            quota: vec![k],
            indices,
        }
    }

    pub fn full(pool: usize) -> Self {
        Self::ungrouped((0..pool).collect())
    }

    pub fn contains(&self, index: usize) -> bool {
        self.indices.binary_search(&index).is_ok()
    }

    pub fn is_subset_of(&self, other: &SelectionMask) -> bool {
        self.indices.iter().all(|&i| other.contains(i))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("mask serializes")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum NormOrder {
    L1,
    L2,
}

impl NormOrder {
    pub fn from_p(p: u32) -> Result<Self> {
        match p {
            1 => Ok(Self::L1),
            2 => Ok(Self::L2),
            other => Err(FluxError::InvalidInput(format!("norm order must be 1 or 2, got {other}"))),
        }
    }

    fn distance(self, a: &[f64], b: &[f64]) -> f64 {
        match self {
            Self::L1 => a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum(),
            Self::L2 => a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt(),
        }
    }
}

/// One non-negative score per token in a pool.
#[derive(Debug, Clone, PartialEq)]
pub struct DynamicScores {
    pub scores: Vec<f64>,
    pub p: NormOrder,
}

/// `N` contiguous temporal segments covering `[0, frames)`; the first
/// `frames mod N` segments are one longer.
pub fn group_partition(frames: usize, n: usize) -> Result<Vec<Range<usize>>> {
    if n == 0 || n > frames {
        return Err(FluxError::Selection(format!(
            "group count {n} must lie in 1..={frames}"
        )));
    }
    let base = frames / n;
    let extra = frames % n;
    let mut out = Vec::with_capacity(n);
    let mut start = 0;
    for g in 0..n {
        let len = base + usize::from(g < extra);
        out.push(start..start + len);
        start += len;
    }
    Ok(out)
}

/// Per-group quotas: `⌈K/N⌉` for the first `K mod N` groups, `⌊K/N⌋` after.
pub fn group_quotas(k: usize, n: usize) -> Vec<usize> {
    (0..n).map(|g| k / n + usize::from(g < k % n)).collect()
}

/// Temporal-difference score of each token against the same spatial position
/// in the previous temporal slot (the next slot for `t = 0`). A single-slot
/// grid has no temporal signal and scores zero everywhere.
pub fn dynamic_scores(tokens: &Tensor, grid: &SamplingGrid, p: NormOrder) -> Result<DynamicScores> {
    if tokens.ndim() != 2 || tokens.shape()[0] != grid.pool {
        return Err(FluxError::Shape {
            op: "dynamic_scores",
            lhs: tokens.shape().to_vec(),
            rhs: vec![grid.pool],
        });
    }
    let s = grid.spatial();
    let mut scores = vec![0.0; grid.pool];
    if grid.t > 1 {
        for (i, score) in scores.iter_mut().enumerate() {
            let t = i / s;
            let other = if t == 0 { i + s } else { i - s };
            *score = p.distance(tokens.row(i), tokens.row(other));
        }
    }
    Ok(DynamicScores { scores, p })
}

/// Indices of the `k` largest scores among `candidates`, ties to lower index.
fn top_k(scores: &[f64], candidates: &[usize], k: usize) -> Vec<usize> {
    let mut order = candidates.to_vec();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    order.truncate(k);
    order.sort_unstable();
    order
}

/// Top `quota[g]` tokens by score inside each of `n` temporal groups.
pub fn select_group_dynamic(
    scores: &[f64],
    grid: &SamplingGrid,
    k: usize,
    n: usize,
) -> Result<SelectionMask> {
    if scores.len() != grid.pool {
        return Err(FluxError::Selection(format!(
            "{} scores for a pool of {}",
            scores.len(),
            grid.pool
        )));
    }
    if k > grid.pool {
        return Err(FluxError::Selection(format!("K={k} exceeds pool size {}", grid.pool)));
    }
    let groups = group_partition(grid.t, n)?;
    let quota = group_quotas(k, n);
    let s = grid.spatial();
    let mut picked: Vec<(usize, usize)> = Vec::with_capacity(k);
    for (g, (range, &q)) in groups.iter().zip(&quota).enumerate() {
        let members: Vec<usize> = (range.start * s..range.end * s).collect();
        if q > members.len() {
            return Err(FluxError::QuotaExceeded {
                group: g,
                quota: q,
                available: members.len(),
            });
        }
        picked.extend(top_k(scores, &members, q).into_iter().map(|i| (i, g)));
    }
    picked.sort_unstable();
    Ok(SelectionMask {
        indices: picked.iter().map(|p| p.0).collect(),
        group_of: picked.iter().map(|p| p.1).collect(),
        quota,
    })
}

/// Global top-K (the single-group special case).
pub fn select_dynamic(scores: &[f64], k: usize) -> Result<SelectionMask> {
    if k > scores.len() {
        return Err(FluxError::Selection(format!("K={k} exceeds pool size {}", scores.len())));
    }
    let all: Vec<usize> = (0..scores.len()).collect();
    Ok(SelectionMask::ungrouped(top_k(scores, &all, k)))
}

/// Uniform K-subset without replacement.
pub fn select_random(seed: u64, pool: usize, k: usize) -> Result<SelectionMask> {
    if k > pool {
        return Err(FluxError::Selection(format!("K={k} exceeds pool size {pool}")));
    }
    let mut rng = rng_for(seed, "selector.random");
    Ok(SelectionMask::ungrouped(sample(&mut rng, pool, k).into_vec()))
}

/// Keeps `K / T'` uniformly chosen spatial positions at every temporal slot.
pub fn select_tube(seed: u64, grid: &SamplingGrid, k: usize) -> Result<SelectionMask> {
    if k > grid.pool {
        return Err(FluxError::Selection(format!("K={k} exceeds pool size {}", grid.pool)));
    }
    if !k.is_multiple_of(grid.t) {
        return Err(FluxError::Selection(format!(
            "tube masking needs K divisible by {} temporal slots, got K={k}",
            grid.t
        )));
    }
    let mut rng = rng_for(seed, "selector.tube");
    let spatial = sample(&mut rng, grid.spatial(), k / grid.t).into_vec();
    let mut indices = Vec::with_capacity(k);
    for t in 0..grid.t {
        indices.extend(spatial.iter().map(|&sp| t * grid.spatial() + sp));
    }
    Ok(SelectionMask::ungrouped(indices))
}

/// The `n_student` teacher-visible tokens with the highest CLS attention.
/// `cls_attention[j]` refers to `teacher.indices[j]`.
pub fn student_mask(teacher: &SelectionMask, cls_attention: &[f64], n_student: usize) -> Result<SelectionMask> {
    if cls_attention.len() != teacher.k() {
        return Err(FluxError::Selection(format!(
            "{} attention scores for {} teacher tokens",
            cls_attention.len(),
            teacher.k()
        )));
    }
    if n_student > teacher.k() {
        return Err(FluxError::Selection(format!(
            "student count {n_student} exceeds teacher count {}",
            teacher.k()
        )));
    }
    let all: Vec<usize> = (0..teacher.k()).collect();
    let keep = top_k(cls_attention, &all, n_student);
    let mut quota = vec![0; teacher.n_groups()];
    let mut group_of = Vec::with_capacity(n_student);
    for &j in &keep {
        let g = teacher.group_of[j];
        quota[g] += 1;
        group_of.push(g);
    }
    Ok(SelectionMask {
        indices: keep.iter().map(|&j| teacher.indices[j]).collect(),
        group_of,
        quota,
    })
}

/// Nested masks for decreasing counts from one score ordering. Requires `N`
/// to divide every count so that per-group quotas stay prefix-consistent.
pub fn nested_masks(
    scores: &[f64],
    grid: &SamplingGrid,
    counts: &[usize],
    n: usize,
) -> Result<Vec<SelectionMask>> {
    if let Some(&bad) = counts.iter().find(|&&c| c % n != 0) {
        return Err(FluxError::Selection(format!(
            "count {bad} is not divisible by {n} groups, masks would not nest"
        )));
    }
    if counts.windows(2).any(|w| w[0] < w[1]) {
        return Err(FluxError::Selection("counts must be non-increasing".into()));
    }
    counts
        .iter()
        .map(|&k| select_group_dynamic(scores, grid, k, n))
        .collect()
}

/// Fraction of the `true` entries of `moving` that `mask` selects; `None`
/// when nothing moves.
pub fn recall(mask: &SelectionMask, moving: &[bool]) -> Option<f64> {
    let total = moving.iter().filter(|&&m| m).count();
    if total == 0 {
        return None;
    }
    let hit = mask.indices.iter().filter(|&&i| moving.get(i).copied().unwrap_or(false)).count();
    Some(hit as f64 / total as f64)
}
