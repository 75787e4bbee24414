//! Straightforward dense re-implementations used as oracles. Written
//! independently of the graph engine: plain nested loops over `Vec<Vec<f64>>`.
#![allow(dead_code)]

use flux_core::fluxvit::FluxViTParams;
use flux_core::sampling::TokenPool;
use flux_core::Tensor;

pub type Mat = Vec<Vec<f64>>;

pub fn to_mat(t: &Tensor) -> Mat {
    (0..t.rows()).map(|i| t.row(i).to_vec()).collect()
}

pub fn mm(a: &Mat, b: &Mat) -> Mat {
    let n = b[0].len();
    a.iter()
        .map(|row| {
            (0..n)
                .map(|j| row.iter().enumerate().map(|(k, v)| v * b[k][j]).sum())
                .collect()
        })
        .collect()
}

pub fn transpose(a: &Mat) -> Mat {
    (0..a[0].len()).map(|j| a.iter().map(|r| r[j]).collect()).collect()
}

pub fn add(a: &Mat, b: &Mat) -> Mat {
    a.iter()
        .zip(b)
        .map(|(x, y)| x.iter().zip(y).map(|(p, q)| p + q).collect())
        .collect()
}

pub fn add_row(a: &Mat, r: &[f64]) -> Mat {
    a.iter().map(|x| x.iter().zip(r).map(|(p, q)| p + q).collect()).collect()
}

pub fn layer_norm(a: &Mat, scale: &[f64], shift: &[f64]) -> Mat {
    a.iter()
        .map(|x| {
            let n = x.len() as f64;
            let mean = x.iter().sum::<f64>() / n;
            let var = x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
            let inv = 1.0 / (var + 1e-6).sqrt();
            x.iter()
                .enumerate()
                .map(|(i, v)| (v - mean) * inv * scale[i] + shift[i])
                .collect()
        })
        .collect()
}

pub fn softmax_rows(a: &Mat) -> Mat {
    a.iter()
        .map(|x| {
            let m = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = x.iter().map(|v| (v - m).exp()).collect();
            let s: f64 = e.iter().sum();
            e.iter().map(|v| v / s).collect()
        })
        .collect()
}

pub fn gelu(v: f64) -> f64 {
    0.5 * v * (1.0 + ((2.0 / std::f64::consts::PI).sqrt() * (v + 0.044715 * v.powi(3))).tanh())
}

fn p<'a>(params: &'a FluxViTParams, name: &str) -> &'a Tensor {
    params.tensor(name).unwrap()
}

fn linear(params: &FluxViTParams, name: &str, x: &Mat) -> Mat {
    let w = to_mat(p(params, &format!("{name}.weight")));
    add_row(&mm(x, &w), p(params, &format!("{name}.bias")).data())
}

fn ln(params: &FluxViTParams, name: &str, x: &Mat) -> Mat {
    layer_norm(
        x,
        p(params, &format!("{name}.scale")).data(),
        p(params, &format!("{name}.shift")).data(),
    )
}

/// One attention layer (no residual), on an already-normalized input.
/// Returns the projected output and the per-head softmax matrices.
pub fn attention(params: &FluxViTParams, block: usize, x: &Mat) -> (Mat, Vec<Mat>) {
    let cfg = &params.config;
    let d = cfg.d_model;
    let hd = d / cfg.heads;
    let qkv = linear(params, &format!("blocks.{block}.qkv"), x);
    let lpe = p(params, &format!("blocks.{block}.lpe"));
    let n = x.len();
    let mut z = vec![vec![0.0; d]; n];
    let mut attns = Vec::new();
    for h in 0..cfg.heads {
        let cut = |off: usize| -> Mat { qkv.iter().map(|r| r[off + h * hd..off + (h + 1) * hd].to_vec()).collect() };
        let (q, k, v) = (cut(0), cut(d), cut(2 * d));
        let mut s = mm(&q, &transpose(&k));
        for row in &mut s {
            for e in row.iter_mut() {
                *e /= (hd as f64).sqrt();
            }
        }
        let a = softmax_rows(&s);
        let w: Mat = (0..hd)
            .map(|i| lpe.data()[(h * hd + i) * hd..(h * hd + i + 1) * hd].to_vec())
            .collect();
        let zh = add(&mm(&a, &v), &mm(&v, &w));
        for i in 0..n {
            z[i][h * hd..(h + 1) * hd].copy_from_slice(&zh[i]);
        }
        attns.push(a);
    }
    (linear(params, &format!("blocks.{block}.proj"), &z), attns)
}

/// Trilinear align-corners resize of a `[T,H,W,C]` grid.
pub fn resize(x: &[f64], src: [usize; 3], dst: [usize; 3], c: usize) -> Vec<f64> {
    let coord = |o: usize, i: usize, n: usize| -> f64 {
        if n == 1 || i == 1 {
            0.0
        } else {
            o as f64 * (i - 1) as f64 / (n - 1) as f64
        }
    };
    let at = |t: usize, h: usize, w: usize, ch: usize| x[((t * src[1] + h) * src[2] + w) * c + ch];
    let mut out = Vec::with_capacity(dst.iter().product::<usize>() * c);
    for ot in 0..dst[0] {
        for oh in 0..dst[1] {
            for ow in 0..dst[2] {
                let pos = [coord(ot, src[0], dst[0]), coord(oh, src[1], dst[1]), coord(ow, src[2], dst[2])];
                for ch in 0..c {
                    let mut acc = 0.0;
                    for corner in 0..8 {
                        let mut weight = 1.0;
                        let mut idx = [0usize; 3];
                        for a in 0..3 {
                            let lo = pos[a].floor() as usize;
                            let frac = pos[a] - lo as f64;
                            let hi_side = corner >> a & 1 == 1;
                            idx[a] = if hi_side { (lo + 1).min(src[a] - 1) } else { lo };
                            weight *= if hi_side { frac } else { 1.0 - frac };
                        }
                        if weight != 0.0 {
                            acc += weight * at(idx[0], idx[1], idx[2], ch);
                        }
                    }
                    out.push(acc);
                }
            }
        }
    }
    out
}

/// Depthwise cross-correlation with zero "same" padding.
pub fn dwconv(x: &[f64], dims: [usize; 3], c: usize, kernel: &[f64], k: usize) -> Vec<f64> {
    let r = (k / 2) as isize;
    let mut out = vec![0.0; x.len()];
    for t in 0..dims[0] as isize {
        for h in 0..dims[1] as isize {
            for w in 0..dims[2] as isize {
                for a in -r..=r {
                    for b in -r..=r {
                        for e in -r..=r {
                            let (it, ih, iw) = (t + a, h + b, w + e);
                            if it < 0 || ih < 0 || iw < 0 || it >= dims[0] as isize || ih >= dims[1] as isize || iw >= dims[2] as isize {
                                continue;
                            }
                            let xi = ((it as usize * dims[1] + ih as usize) * dims[2] + iw as usize) * c;
                            let oi = ((t as usize * dims[1] + h as usize) * dims[2] + w as usize) * c;
                            let ki = ((((a + r) as usize) * k + (b + r) as usize) * k + (e + r) as usize) * c;
                            for ch in 0..c {
                                out[oi + ch] += kernel[ki + ch] * x[xi + ch];
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

pub struct DenseOut {
    pub logits: Vec<f64>,
    pub features: Vec<f64>,
    pub cls_attn: Vec<f64>,
}

/// The whole model, step by step, on the tokens at `indices` (ascending).
pub fn forward(params: &FluxViTParams, pool: &TokenPool, indices: &[usize]) -> DenseOut {
    let cfg = &params.config;
    let d = cfg.d_model;
    let raw: Mat = indices.iter().map(|&i| pool.features.row(i).to_vec()).collect();
    let x = if cfg.use_pre_ln { ln(params, "patch.ln_pre", &raw) } else { raw };
    let x = ln(params, "patch.ln_post", &linear(params, "patch", &x));

    let dims = pool.grid.dims();
    let table = p(params, "glpe.table").data().to_vec();
    let mut pe = if dims == cfg.pe_grid { table } else { resize(&table, cfg.pe_grid, dims, d) };
    if cfg.use_dw_conv {
        pe = dwconv(&pe, dims, d, p(params, "glpe.kernel").data(), cfg.dw_kernel);
    }
    let tokens: Mat = x
        .iter()
        .zip(indices)
        .map(|(row, &i)| row.iter().zip(&pe[i * d..(i + 1) * d]).map(|(a, b)| a + b).collect())
        .collect();

    let cls: Vec<f64> = p(params, "cls.token")
        .data()
        .iter()
        .zip(p(params, "cls.pos").data())
        .map(|(a, b)| a + b)
        .collect();
    let mut h: Mat = std::iter::once(cls).chain(tokens).collect();
    let mut last = Vec::new();
    for b in 0..cfg.depth {
        let (a, attn) = attention(params, b, &ln(params, &format!("blocks.{b}.ln1"), &h));
        h = add(&h, &a);
        let m = linear(params, &format!("blocks.{b}.fc1"), &ln(params, &format!("blocks.{b}.ln2"), &h));
        let m: Mat = m.iter().map(|r| r.iter().map(|&v| gelu(v)).collect()).collect();
        h = add(&h, &linear(params, &format!("blocks.{b}.fc2"), &m));
        last = attn;
    }
    let y = ln(params, "norm", &h);
    let k = indices.len();
    let features: Vec<f64> = (0..d).map(|j| y[1..].iter().map(|r| r[j]).sum::<f64>() / k as f64).collect();
    let logits = linear(params, "head", &vec![features.clone()]).remove(0);
    let cls_attn = (0..k)
        .map(|j| last.iter().map(|a| a[0][j + 1]).sum::<f64>() / last.len() as f64)
        .collect();
    DenseOut {
        logits,
        features,
        cls_attn,
    }
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// Seeded separable concave score surface over a lattice, in index space:
/// `base − a·(i − i*)² − b·(j − j*)²`, with the frame optimum inside the
/// lattice and the resolution optimum at or below the starting level.
pub struct Surface {
    pub base: f64,
    pub a: f64,
    pub b: f64,
    pub i_star: f64,
    pub j_star: f64,
}

impl Surface {
    pub fn seeded(seed: u64, plateau_eps: f64, frames: usize, start_level: usize) -> Self {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        Self {
            base: rng.random_range(0.5..0.9),
            a: rng.random_range(plateau_eps..0.02),
            b: rng.random_range(plateau_eps..0.02),
            i_star: rng.random_range(1.0..(frames - 1) as f64),
            j_star: rng.random_range(0.0..start_level as f64),
        }
    }

    pub fn score(&self, lattice: &flux_core::tokenopt::Lattice, f: usize, r: usize) -> f64 {
        let i = lattice.frames.iter().position(|&v| v == f).unwrap() as f64;
        let j = lattice.resolutions.iter().position(|&v| v == r).unwrap() as f64;
        self.base - self.a * (i - self.i_star).powi(2) - self.b * (j - self.j_star).powi(2)
    }
}

/// Counts multiply-accumulates of a naive single-block transformer forward
/// (`[n, d]` input, `heads` heads, MLP ×`ratio`), computing real values so
/// every counted MAC is an executed one.
pub fn naive_block_macs(n: usize, d: usize, heads: usize, ratio: usize) -> u64 {
    let mut macs = 0u64;
    let x: Mat = (0..n).map(|i| (0..d).map(|j| ((i * d + j) % 7) as f64 * 0.1).collect()).collect();
    let matmul = |a: &Mat, w_cols: usize, macs: &mut u64| -> Mat {
        a.iter()
            .map(|row| {
                (0..w_cols)
                    .map(|c| {
                        let mut acc = 0.0;
                        for (k, v) in row.iter().enumerate() {
                            acc += v * (((k + c) % 5) as f64 * 0.01);
                            *macs += 1;
                        }
                        acc
                    })
                    .collect()
            })
            .collect()
    };
    let qkv = matmul(&x, 3 * d, &mut macs);
    let hd = d / heads;
    let mut z = vec![vec![0.0; d]; n];
    for h in 0..heads {
        let mut s = vec![vec![0.0; n]; n];
        for i in 0..n {
            for j in 0..n {
                for c in 0..hd {
                    s[i][j] += qkv[i][h * hd + c] * qkv[j][d + h * hd + c];
                    macs += 1;
                }
            }
        }
        let a = softmax_rows(&s);
        for i in 0..n {
            for j in 0..n {
                for c in 0..hd {
                    z[i][h * hd + c] += a[i][j] * qkv[j][2 * d + h * hd + c];
                    macs += 1;
                }
            }
        }
    }
    let o = matmul(&z, d, &mut macs);
    let hidden = matmul(&o, ratio * d, &mut macs);
    let _ = matmul(&hidden, d, &mut macs);
    macs
}
