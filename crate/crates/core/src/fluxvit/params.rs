use std::collections::HashMap;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::FluxViTConfig;
use crate::error::{FluxError, Result};
use crate::rng::rng_for;
use crate::tensor::Tensor;

/// Named tensors in a fixed insertion order.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamSet {
    names: Vec<String>,
    tensors: Vec<Tensor>,
    index: HashMap<String, usize>,
}

impl ParamSet {
    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) {
        let name = name.into();
        if let Some(&i) = self.index.get(&name) {
            self.tensors[i] = t;
            return;
        }
        self.index.insert(name.clone(), self.names.len());
        self.names.push(name);
        self.tensors.push(t);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.index.get(name).map(|&i| &self.tensors[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.index.get(name).map(|&i| &mut self.tensors[i])
    }

    pub fn position(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.tensors.iter().all(Tensor::is_finite)
    }

    /// Same names and shapes, all zeros.
    pub fn zeros_like(&self) -> Self {
        let mut out = Self::default();
        for (n, t) in self.iter() {
            out.insert(n, Tensor::zeros(t.shape()));
        }
        out
    }
}

/// Parameter tree of one FluxViT, keyed by dotted names.
#[derive(Debug, Clone, PartialEq)]
pub struct FluxViTParams {
    pub config: FluxViTConfig,
    pub set: ParamSet,
}

impl FluxViTParams {
    pub fn tensor(&self, name: &str) -> Result<&Tensor> {
        self.set
            .get(name)
            .ok_or_else(|| FluxError::Checkpoint(format!("missing parameter {name}")))
    }

    /// Adds uniform noise of the given amplitude to every entry, so that no
    /// pathway is identically zero (used by gradient checks).
    pub fn perturbed(&self, seed: u64, amplitude: f64) -> Self {
        let mut out = self.clone();
        let mut rng = rng_for(seed, "params.perturb");
        for t in out.set.tensors_mut() {
            for v in t.data_mut() {
                *v += rng.random_range(-amplitude..amplitude);
            }
        }
        out
    }
}

fn sincos_1d(dim: usize, pos: f64, out: &mut [f64]) {
    let half = dim / 2;
    for i in 0..half {
        let omega = 1.0 / 10000f64.powf(i as f64 / half as f64);
        out[i] = (pos * omega).sin();
        out[half + i] = (pos * omega).cos();
    }
}

/// `[T,H,W,D]` sine-cosine table: the first `D/4` channels encode time, the
/// next `3D/8` height and the last `3D/8` width.
pub fn sincos_3d(grid: [usize; 3], d: usize) -> Tensor {
    let dt = d / 4;
    let dh = (d - dt) / 2;
    let dw = d - dt - dh;
    let [t, h, w] = grid;
    let mut data = vec![0.0; t * h * w * d];
    for ti in 0..t {
        for hi in 0..h {
            for wi in 0..w {
                let base = ((ti * h + hi) * w + wi) * d;
                let row = &mut data[base..base + d];
                sincos_1d(dt, ti as f64, &mut row[..dt]);
                sincos_1d(dh, hi as f64, &mut row[dt..dt + dh]);
                sincos_1d(dw, wi as f64, &mut row[dt + dh..]);
            }
        }
    }
    Tensor::new(vec![t, h, w, d], data).expect("table shape")
}

fn trunc_normal(rng: &mut impl Rng, shape: &[usize], std: f64) -> Tensor {
    let normal = Normal::new(0.0, std).expect("positive std");
    Tensor::from_fn(shape, |_| loop {
        let v: f64 = normal.sample(rng);
        if v.abs() <= 3.0 * std {
            break v;
        }
    })
}

/// Fresh parameters: truncated-normal (σ = 0.02, cut at 3σ) projections, zero
/// biases, unit/zero norms, sine-cosine positional table, identity depthwise
/// kernel, zero value-projection bias and zero classifier.
pub fn init_params(config: &FluxViTConfig, seed: u64) -> Result<FluxViTParams> {
    config.validate()?;
    let mut rng = rng_for(seed, "params.init");
    let d = config.d_model;
    let cp = config.patch_dim();
    let hd = config.head_dim();
    let hidden = d * config.mlp_ratio;
    let k = config.dw_kernel;
    let mut set = ParamSet::default();
    let ln = |set: &mut ParamSet, name: &str, n: usize| {
        set.insert(format!("{name}.scale"), Tensor::full(&[n], 1.0));
        set.insert(format!("{name}.shift"), Tensor::zeros(&[n]));
    };

    ln(&mut set, "patch.ln_pre", cp);
    set.insert("patch.weight", trunc_normal(&mut rng, &[cp, d], 0.02));
    set.insert("patch.bias", Tensor::zeros(&[d]));
    ln(&mut set, "patch.ln_post", d);

    set.insert("glpe.table", sincos_3d(config.pe_grid, d));
    let mut kernel = Tensor::zeros(&[k, k, k, d]);
    let center = ((k / 2 * k + k / 2) * k + k / 2) * d;
    kernel.data_mut()[center..center + d].fill(1.0);
    set.insert("glpe.kernel", kernel);

    set.insert("cls.token", trunc_normal(&mut rng, &[d], 0.02));
    set.insert("cls.pos", Tensor::zeros(&[d]));

    for b in 0..config.depth {
        let p = format!("blocks.{b}");
        ln(&mut set, &format!("{p}.ln1"), d);
        set.insert(format!("{p}.qkv.weight"), trunc_normal(&mut rng, &[d, 3 * d], 0.02));
        set.insert(format!("{p}.qkv.bias"), Tensor::zeros(&[3 * d]));
        set.insert(format!("{p}.lpe"), Tensor::zeros(&[config.heads, hd, hd]));
        set.insert(format!("{p}.proj.weight"), trunc_normal(&mut rng, &[d, d], 0.02));
        set.insert(format!("{p}.proj.bias"), Tensor::zeros(&[d]));
        ln(&mut set, &format!("{p}.ln2"), d);
        set.insert(format!("{p}.fc1.weight"), trunc_normal(&mut rng, &[d, hidden], 0.02));
        set.insert(format!("{p}.fc1.bias"), Tensor::zeros(&[hidden]));
        set.insert(format!("{p}.fc2.weight"), trunc_normal(&mut rng, &[hidden, d], 0.02));
        set.insert(format!("{p}.fc2.bias"), Tensor::zeros(&[d]));
    }

    ln(&mut set, "norm", d);
    set.insert("head.weight", Tensor::zeros(&[d, config.num_classes]));
    set.insert("head.bias", Tensor::zeros(&[config.num_classes]));
    set.insert("align.weight", trunc_normal(&mut rng, &[d, config.proj_dim], 0.02));
    set.insert("align.bias", Tensor::zeros(&[config.proj_dim]));

    Ok(FluxViTParams {
        config: config.clone(),
        set,
    })
}
