use super::{FluxViTConfig, FluxViTParams, ParamSet};
use crate::error::{FluxError, Result};
use crate::sampling::{patchify, SamplingGrid, TokenPool};
use crate::selector::SelectionMask;
use crate::tensor::{grad_check, GradCheckReport, Graph, Tensor, Var};
use crate::videogen::{gen_video, ClassSemantics, GenSpec};

/// Parameters registered on one graph.
pub struct Bound<'a> {
    set: &'a ParamSet,
    vars: Vec<Var>,
}

impl<'a> Bound<'a> {
    pub fn from_vars(set: &'a ParamSet, vars: Vec<Var>) -> Self {
        assert_eq!(set.len(), vars.len(), "one var per parameter");
        Self { set, vars }
    }

    pub fn get(&self, name: &str) -> Result<Var> {
        self.set
            .position(name)
            .map(|i| self.vars[i])
            .ok_or_else(|| FluxError::Checkpoint(format!("missing parameter {name}")))
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }
}

/// Registers every parameter as a leaf; `trainable` decides whether they
/// receive gradients.
pub fn bind<'a>(g: &mut Graph, params: &'a FluxViTParams, trainable: bool) -> Bound<'a> {
    let vars = params
        .set
        .tensors()
        .iter()
        .map(|t| if trainable { g.param(t.clone()) } else { g.constant(t.clone()) })
        .collect();
    Bound {
        set: &params.set,
        vars,
    }
}

fn ln(g: &mut Graph, b: &Bound, name: &str, x: Var) -> Result<Var> {
    let s = b.get(&format!("{name}.scale"))?;
    let t = b.get(&format!("{name}.shift"))?;
    g.layer_norm(x, s, t)
}

fn linear(g: &mut Graph, b: &Bound, name: &str, x: Var) -> Result<Var> {
    let w = b.get(&format!("{name}.weight"))?;
    let bias = b.get(&format!("{name}.bias"))?;
    let y = g.matmul(x, w)?;
    g.add(y, bias)
}

/// `LN_post(LN_pre(raw)·W + b)` on `[K, C_patch]` raw patches.
pub fn patch_embed_dpn(g: &mut Graph, b: &Bound, cfg: &FluxViTConfig, raw: Var) -> Result<Var> {
    let x = if cfg.use_pre_ln { ln(g, b, "patch.ln_pre", raw)? } else { raw };
    let y = linear(g, b, "patch", x)?;
    ln(g, b, "patch.ln_post", y)
}

/// Positional rows for the tokens at `indices` of a pool on `grid`: resize the
/// table to the grid, depthwise-convolve on that grid, then gather.
pub fn glpe(g: &mut Graph, b: &Bound, cfg: &FluxViTConfig, grid: &SamplingGrid, indices: &[usize]) -> Result<Var> {
    let dims = grid.dims();
    if dims.iter().zip(&cfg.pe_grid).any(|(d, m)| d > m) {
        return Err(FluxError::InvalidInput(format!(
            "grid {dims:?} exceeds positional table {:?}",
            cfg.pe_grid
        )));
    }
    let mut pe = b.get("glpe.table")?;
    if dims != cfg.pe_grid {
        pe = g.resize3d(pe, dims)?;
    }
    if cfg.use_dw_conv {
        let k = b.get("glpe.kernel")?;
        pe = g.dwconv3d(pe, k)?;
    }
    let flat = g.reshape(pe, &[grid.pool, cfg.d_model])?;
    g.gather(flat, indices)
}

pub struct AttentionOutput {
    pub out: Var,
    /// Per-head `[N, N]` softmax matrices before the value-projection term.
    pub attn: Vec<Var>,
}

/// Multi-head attention with the value-projection bias:
/// `Z_h = softmax(Q_h K_hᵀ/√d) V_h + V_h W_lpe,h`, heads concatenated and
/// output-projected. `x` is the already-normalized `[N, D]` input.
pub fn attention_lpe(g: &mut Graph, b: &Bound, cfg: &FluxViTConfig, block: usize, x: Var) -> Result<AttentionOutput> {
    let d = cfg.d_model;
    let hd = cfg.head_dim();
    let p = format!("blocks.{block}");
    let qkv = linear(g, b, &format!("{p}.qkv"), x)?;
    let lpe = b.get(&format!("{p}.lpe"))?;
    let scale = 1.0 / (hd as f64).sqrt();
    let mut heads = Vec::with_capacity(cfg.heads);
    let mut attn = Vec::with_capacity(cfg.heads);
    for h in 0..cfg.heads {
        let q = g.narrow(qkv, 1, h * hd, hd)?;
        let k = g.narrow(qkv, 1, d + h * hd, hd)?;
        let v = g.narrow(qkv, 1, 2 * d + h * hd, hd)?;
        let kt = g.transpose(k)?;
        let s = g.matmul(q, kt)?;
        let s = g.scale(s, scale);
        let a = g.softmax(s)?;
        let mut z = g.matmul(a, v)?;
        if cfg.use_lpe {
            let w = g.narrow(lpe, 0, h, 1)?;
            let w = g.reshape(w, &[hd, hd])?;
            let bias = g.matmul(v, w)?;
            z = g.add(z, bias)?;
        }
        heads.push(z);
        attn.push(a);
    }
    let z = g.concat(&heads, 1)?;
    let out = linear(g, b, &format!("{p}.proj"), z)?;
    Ok(AttentionOutput { out, attn })
}

pub struct ForwardOutput {
    /// `[K, D]` final-normalized features of the selected tokens (CLS dropped).
    pub tokens: Var,
    /// `[D]` mean of `tokens`.
    pub features: Var,
    /// `[1, num_classes]`
    pub logits: Var,
    /// Final-block CLS attention over the K tokens, averaged over heads.
    pub cls_attn: Vec<f64>,
}

/// Full forward on the tokens of `pool` chosen by `mask`.
pub fn forward(g: &mut Graph, b: &Bound, cfg: &FluxViTConfig, pool: &TokenPool, mask: &SelectionMask) -> Result<ForwardOutput> {
    if mask.indices.is_empty() {
        return Err(FluxError::Selection("empty mask".into()));
    }
    let mut indices = mask.indices.clone();
    indices.sort_unstable();
    indices.dedup();
    if indices.len() != mask.indices.len() {
        return Err(FluxError::Selection("mask contains duplicate indices".into()));
    }
    let k = indices.len();
    let d = cfg.d_model;
    let raw = g.constant(pool.features.gather_rows(&indices)?);
    let tok = patch_embed_dpn(g, b, cfg, raw)?;
    let pe = glpe(g, b, cfg, &pool.grid, &indices)?;
    let tok = g.add(tok, pe)?;

    let cls_t = b.get("cls.token")?;
    let cls_p = b.get("cls.pos")?;
    let cls = g.add(cls_t, cls_p)?;
    let cls = g.reshape(cls, &[1, d])?;
    let mut x = g.concat(&[cls, tok], 0)?;

    let mut last_attn = Vec::new();
    for blk in 0..cfg.depth {
        let p = format!("blocks.{blk}");
        let h = ln(g, b, &format!("{p}.ln1"), x)?;
        let att = attention_lpe(g, b, cfg, blk, h)?;
        x = g.add(x, att.out)?;
        let h = ln(g, b, &format!("{p}.ln2"), x)?;
        let h = linear(g, b, &format!("{p}.fc1"), h)?;
        let h = g.gelu(h);
        let h = linear(g, b, &format!("{p}.fc2"), h)?;
        x = g.add(x, h)?;
        last_attn = att.attn;
    }
    let y = ln(g, b, "norm", x)?;
    let tokens = g.narrow(y, 0, 1, k)?;
    let features = g.mean_axis(tokens, 0)?;
    let f2 = g.reshape(features, &[1, d])?;
    let logits = linear(g, b, "head", f2)?;

    let mut cls_attn = vec![0.0; k];
    for &a in &last_attn {
        let row = g.value(a).row(0);
        for (c, v) in cls_attn.iter_mut().zip(&row[1..]) {
            *c += v / last_attn.len() as f64;
        }
    }
    Ok(ForwardOutput {
        tokens,
        features,
        logits,
        cls_attn,
    })
}

/// Alignment head applied to `[n, D]` token features.
pub fn project(g: &mut Graph, b: &Bound, tokens: Var) -> Result<Var> {
    linear(g, b, "align", tokens)
}

/// DPN embedding of every token in the pool, without gradient tracking.
pub fn embed_pool(params: &FluxViTParams, pool: &TokenPool) -> Result<Tensor> {
    let mut g = Graph::new();
    let b = bind(&mut g, params, false);
    let raw = g.constant(pool.features.clone());
    let e = patch_embed_dpn(&mut g, &b, &params.config, raw)?;
    Ok(g.value(e).clone())
}

/// Finite-difference check of the full model's cross-entropy gradient on a
/// seeded synthetic clip, over every parameter tensor.
pub fn gradcheck_model(config: &FluxViTConfig, seed: u64, eps: f64) -> Result<(GradCheckReport, Vec<String>)> {
    let base = super::init_params(config, seed)?;
    // nonzero everywhere so that the classifier, W_lpe and the DW kernel all
    // carry gradient
    let params = base.perturbed(seed, 0.05);
    let [t, gh] = [config.pe_grid[0].min(10), config.pe_grid[1].min(config.pe_grid[2]).min(2)];
    let res = gh * config.patch[1];
    let spec = GenSpec {
        num_classes: config.num_classes.min(4),
        frames: t * config.patch[0],
        height: res,
        width: res,
        channels: config.channels,
        sprites_min: 1,
        sprites_max: 2,
        sprite_size_min: 2,
        sprite_size_max: (res / 2).max(2),
        speed_min: 0.5,
        speed_max: 1.0,
        noise_amplitude: 0.1,
        semantics: ClassSemantics::MotionDirection,
    };
    let video = gen_video(seed, &spec)?;
    let grid = SamplingGrid::new(spec.frames, res, config.patch);
    let pool = patchify(&video, &grid)?;
    let mask = SelectionMask::full(pool.len());
    let label = video.label;
    let report = grad_check(
        |g, vars| {
            let b = Bound::from_vars(&params.set, vars.to_vec());
            let out = forward(g, &b, config, &pool, &mask)?;
            g.cross_entropy(out.logits, &[label])
        },
        params.set.tensors(),
        eps,
    )?;
    Ok((report, params.set.names().to_vec()))
}
