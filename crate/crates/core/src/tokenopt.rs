//! Token optimization: a multiply-accumulate cost model, a linear-cost search
//! over (frames, resolution) under a fixed token budget, and Pareto frontiers.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{invalid_config, FluxError, Result};
use crate::fluxvit::FluxViTConfig;
use crate::sampling::{SamplerConfig, SamplingGrid};

/// Multiply-accumulate counts (1 MAC counted as 1 FLOP).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FlopReport {
    pub n_tokens: u64,
    pub patch_embed: u64,
    pub qkv_out_proj: u64,
    pub attn_scores: u64,
    pub attn_apply: u64,
    pub mlp: u64,
    pub head: u64,
    pub total: u64,
    pub config: FluxViTConfig,
}

impl FlopReport {
    pub fn gflops(&self) -> f64 {
        self.total as f64 / 1e9
    }
}

/// MACs of one transformer block over `n` tokens (CLS included by the caller).
pub fn block_macs(d_model: u64, mlp_ratio: u64, n: u64) -> u64 {
    4 * n * d_model * d_model + 2 * mlp_ratio * n * d_model * d_model + 2 * n * n * d_model
}

/// Cost of one forward over `n_tokens` selected tokens plus the CLS token.
/// The value-projection bias term is not counted.
pub fn flops(cfg: &FluxViTConfig, n_tokens: usize) -> FlopReport {
    let d = cfg.d_model as u64;
    let depth = cfg.depth as u64;
    let k = n_tokens as u64;
    let n = k + 1;
    let patch_embed = k * cfg.patch_dim() as u64 * d;
    let qkv_out_proj = depth * 4 * n * d * d;
    let attn_scores = depth * n * n * d;
    let attn_apply = depth * n * n * d;
    let mlp = depth * 2 * cfg.mlp_ratio as u64 * n * d * d;
    let head = d * cfg.num_classes as u64;
    FlopReport {
        n_tokens: k,
        patch_embed,
        qkv_out_proj,
        attn_scores,
        attn_apply,
        mlp,
        head,
        total: patch_embed + qkv_out_proj + attn_scores + attn_apply + mlp + head,
        config: cfg.clone(),
    }
}

/// A ViT-style shape with 64-wide heads, 1×14×14 RGB patches and 400 classes.
pub fn vit_shape(d_model: usize, depth: usize) -> FluxViTConfig {
    FluxViTConfig {
        d_model,
        heads: (d_model / 64).max(1),
        depth,
        mlp_ratio: 4,
        pe_grid: [24, 16, 16],
        patch: [1, 14, 14],
        channels: 3,
        dw_kernel: 3,
        num_classes: 400,
        proj_dim: d_model,
        use_pre_ln: true,
        use_dw_conv: true,
        use_lpe: true,
    }
}

/// The (frames × resolution) lattice the search walks.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Lattice {
    pub frames: Vec<usize>,
    pub resolutions: Vec<usize>,
    pub patch: [usize; 3],
}

impl Lattice {
    pub fn from_sampler(cfg: &SamplerConfig) -> Self {
        Self {
            frames: cfg.frame_values(),
            resolutions: cfg.resolution_values(),
            patch: cfg.patch(),
        }
    }

    /// Frames {4,6,8,10,12,16,20} × resolutions {168,…,280}.
    pub fn sweep_7x5() -> Self {
        Self {
            frames: vec![4, 6, 8, 10, 12, 16, 20],
            resolutions: vec![168, 196, 224, 252, 280],
            patch: [1, 14, 14],
        }
    }

    pub fn grid(&self, fi: usize, ri: usize) -> SamplingGrid {
        SamplingGrid::new(self.frames[fi], self.resolutions[ri], self.patch)
    }

    fn validate(&self) -> Result<()> {
        if self.frames.is_empty() || self.resolutions.is_empty() {
            return Err(invalid_config("tokenopt: empty lattice"));
        }
        if self.frames.windows(2).any(|w| w[0] >= w[1]) || self.resolutions.windows(2).any(|w| w[0] >= w[1]) {
            return Err(invalid_config("tokenopt: lattice values must be strictly increasing"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlanEntry {
    pub frames: usize,
    pub resolution: usize,
    pub pool: usize,
    pub flops: u64,
    pub score: Option<f64>,
    pub visited: bool,
}

/// Feasible candidates (pool ≥ budget), frames-major, with search results.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BudgetPlan {
    pub budget: usize,
    pub entries: Vec<PlanEntry>,
    /// Entry indices in evaluation order.
    pub visit_order: Vec<usize>,
    pub chosen: Option<usize>,
}

impl BudgetPlan {
    pub fn visited(&self) -> usize {
        self.visit_order.len()
    }

    pub fn chosen_entry(&self) -> Option<&PlanEntry> {
        self.chosen.map(|i| &self.entries[i])
    }

    fn find(&self, frames: usize, resolution: usize) -> Option<usize> {
        self.entries
            .iter()
            .position(|e| e.frames == frames && e.resolution == resolution)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("F,R,pool,flops,score,visited,chosen\n");
        for (i, e) in self.entries.iter().enumerate() {
            let score = e.score.map(|s| format!("{s}")).unwrap_or_default();
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{}",
                e.frames,
                e.resolution,
                e.pool,
                e.flops,
                score,
                u8::from(e.visited),
                u8::from(self.chosen == Some(i))
            );
        }
        out
    }
}

/// The search stopped because the evaluator failed; `plan` holds what was
/// evaluated up to that point.
#[derive(Debug)]
pub struct SearchFailure {
    pub plan: BudgetPlan,
    pub error: FluxError,
}

impl std::fmt::Display for SearchFailure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "search failed after {} evaluations: {}", self.plan.visited(), self.error)
    }
}

impl std::error::Error for SearchFailure {}

struct Walk<'a, E> {
    lattice: &'a Lattice,
    plan: BudgetPlan,
    evaluator: E,
    best: Option<(usize, usize, f64)>,
    cap: usize,
}

impl<E: FnMut(usize, usize, usize) -> Result<f64>> Walk<'_, E> {
    fn feasible(&self, fi: usize, ri: usize) -> bool {
        self.lattice.grid(fi, ri).pool >= self.plan.budget
    }

    /// Scores (fi, ri), returning `None` once the visit cap is reached.
    fn eval(&mut self, fi: usize, ri: usize) -> Result<Option<f64>> {
        let idx = self
            .plan
            .find(self.lattice.frames[fi], self.lattice.resolutions[ri])
            .expect("only feasible points are evaluated");
        if let Some(s) = self.plan.entries[idx].score {
            return Ok(Some(s));
        }
        if self.plan.visited() >= self.cap {
            return Ok(None);
        }
        let s = (self.evaluator)(self.lattice.frames[fi], self.lattice.resolutions[ri], self.plan.budget)?;
        if !s.is_finite() {
            return Err(FluxError::NonFinite("evaluator score"));
        }
        let e = &mut self.plan.entries[idx];
        e.score = Some(s);
        e.visited = true;
        self.plan.visit_order.push(idx);
        Ok(Some(s))
    }

    /// Records `s` at (fi, ri) if it strictly beats the best so far.
    fn improve(&mut self, fi: usize, ri: usize, s: f64) -> bool {
        match self.best {
            Some((_, _, b)) if s <= b => false,
            _ => {
                self.best = Some((fi, ri, s));
                true
            }
        }
    }

    fn run(&mut self, plateau_eps: f64) -> Result<()> {
        let nf = self.lattice.frames.len();
        let nr = self.lattice.resolutions.len();
        let f0 = self.lattice.frames[0];
        let pt = self.lattice.patch[0];
        let r0 = (0..nr)
            .rev()
            .find(|&ri| {
                let g = SamplingGrid::new(f0, self.lattice.resolutions[ri], self.lattice.patch);
                (f0 / pt) * g.gh * g.gw <= self.plan.budget
            })
            .unwrap_or(0);

        // phase 1: more frames at the starting resolution until the gain plateaus
        let mut first = None;
        for fi in 0..nf {
            if !self.feasible(fi, r0) {
                continue;
            }
            let Some(s) = self.eval(fi, r0)? else { return Ok(()) };
            let prev = self.best.map(|b| b.2);
            self.improve(fi, r0, s);
            match prev {
                None => first = Some(s),
                Some(p) if s - p < plateau_eps => break,
                Some(_) => {}
            }
        }
        let Some((mut bf, mut br, best)) = self.best else {
            return Ok(());
        };
        if first.is_some_and(|f| best <= f) {
            return Ok(());
        }

        // phase 2: one resolution level down at a time, then more frames there
        while br > 0 {
            let ri = br - 1;
            let Some(fi) = (bf..nf).find(|&fi| self.feasible(fi, ri)) else { break };
            let Some(s) = self.eval(fi, ri)? else { break };
            if !self.improve(fi, ri, s) {
                break;
            }
            (bf, br) = (fi, ri);
            for up in fi + 1..nf {
                let Some(s) = self.eval(up, ri)? else { break };
                if !self.improve(up, ri, s) {
                    break;
                }
                bf = up;
            }
        }
        Ok(())
    }
}

/// Budgeted search over `lattice`. Phase 1 fixes the largest resolution at
/// which the smallest frame count fits the budget and adds frames until the
/// gain falls below `plateau_eps`. Phase 2 repeatedly drops one resolution
/// level (taking the smallest feasible frame count not below the current
/// best) and, if that improves, adds frames while the score strictly rises.
/// At most `|frames| + |resolutions|` points are evaluated; exact ties keep
/// the earlier point.
#[allow(clippy::result_large_err)]
pub fn heuristic_search<E>(
    evaluator: E,
    budget: usize,
    lattice: &Lattice,
    plateau_eps: f64,
    model: &FluxViTConfig,
) -> std::result::Result<BudgetPlan, SearchFailure>
where
    E: FnMut(usize, usize, usize) -> Result<f64>,
{
    let mut entries = Vec::new();
    for fi in 0..lattice.frames.len() {
        for ri in 0..lattice.resolutions.len() {
            let g = lattice.grid(fi, ri);
            if g.pool >= budget {
                entries.push(PlanEntry {
                    frames: g.frames,
                    resolution: g.resolution,
                    pool: g.pool,
                    flops: flops(model, budget).total,
                    score: None,
                    visited: false,
                });
            }
        }
    }
    let plan = BudgetPlan {
        budget,
        entries,
        visit_order: Vec::new(),
        chosen: None,
    };
    let fail = |plan, error| SearchFailure { plan, error };
    if let Err(e) = lattice.validate() {
        return Err(fail(plan, e));
    }
    if !(plateau_eps >= 0.0) {
        return Err(fail(plan, invalid_config("tokenopt: plateau_eps must be non-negative")));
    }
    let mut walk = Walk {
        lattice,
        plan,
        evaluator,
        best: None,
        cap: lattice.frames.len() + lattice.resolutions.len(),
    };
    let outcome = walk.run(plateau_eps);
    if let Some((fi, ri, _)) = walk.best {
        walk.plan.chosen = walk.plan.find(lattice.frames[fi], lattice.resolutions[ri]);
    }
    match outcome {
        Ok(()) => Ok(walk.plan),
        Err(e) => Err(fail(walk.plan, e)),
    }
}

/// Non-dominated `(flops, score)` points (lower flops, higher score), sorted
/// by flops ascending. Exact duplicates appear once.
pub fn pareto(points: &[(f64, f64)]) -> Vec<(f64, f64)> {
    let mut sorted = points.to_vec();
    sorted.sort_by(|a, b| a.0.total_cmp(&b.0).then(b.1.total_cmp(&a.1)));
    let mut out: Vec<(f64, f64)> = Vec::new();
    for p in sorted {
        if out.last().is_none_or(|last| p.1 > last.1) {
            out.push(p);
        }
    }
    out
}
