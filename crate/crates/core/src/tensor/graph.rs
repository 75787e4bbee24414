use super::kernels;
use super::{matmul_dims, Tensor, LN_EPS};
use crate::error::{FluxError, Result};

/// Handle to a node recorded on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Mul(Var, Var),
    MulRow(Var, Var),
    Scale(Var, f64),
    Softmax(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Gelu(Var),
    DwConv3d {
        x: Var,
        kernel: Var,
        dims: [usize; 3],
        k: [usize; 3],
    },
    Gather {
        x: Var,
        indices: Vec<usize>,
    },
    MeanAxis {
        x: Var,
        outer: usize,
        len: usize,
        inner: usize,
    },
    Concat {
        inputs: Vec<Var>,
        outer: usize,
        widths: Vec<usize>,
    },
    Narrow {
        x: Var,
        outer: usize,
        full: usize,
        start: usize,
        len: usize,
    },
    Reshape(Var),
    Sum(Var),
    SmoothL1 {
        a: Var,
        b: Var,
        beta: f64,
    },
    CrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Vec<f64>,
    },
    L2Normalize {
        x: Var,
        norms: Vec<f64>,
    },
    Resize3d {
        x: Var,
        src: [usize; 3],
        dst: [usize; 3],
    },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Records primitives in creation order and differentiates them in reverse.
///
/// A graph is single-use and single-threaded; build a fresh one per forward.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Gradients of a scalar with respect to every node that required one.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

fn shape_err(op: &'static str, a: &Tensor, b: &Tensor) -> FluxError {
    FluxError::Shape {
        op,
        lhs: a.shape().to_vec(),
        rhs: b.shape().to_vec(),
    }
}

fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let len = shape[axis];
    let inner = shape[axis + 1..].iter().product();
    (outer, len, inner)
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// A trainable leaf.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// A leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Copies the current value of `v` into a gradient-free leaf.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.nodes[v.0].value.clone();
        self.constant(value)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        let (m, k, n) = matmul_dims(va.shape(), vb.shape())?;
        let mut out = vec![0.0; m * n];
        kernels::gemm(va.data(), vb.data(), m, k, n, &mut out);
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::new(vec![m, n], out)?, Op::MatMul(a, b), rg))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let va = self.value(a);
        if va.ndim() != 2 {
            return Err(shape_err("transpose", va, va));
        }
        let (r, c) = (va.shape()[0], va.shape()[1]);
        let out = kernels::transpose(va.data(), r, c);
        let rg = self.rg(&[a]);
        Ok(self.push(Tensor::new(vec![c, r], out)?, Op::Transpose(a), rg))
    }

    /// Elementwise sum. `b` may also be a 1-D vector matching `a`'s last axis,
    /// in which case it is broadcast over every row.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "add", |x, y| x + y)
    }

    /// Elementwise product with the same broadcasting rule as [`Graph::add`].
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "mul", |x, y| x * y)
    }

    fn binary(&mut self, a: Var, b: Var, op: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        let rg = self.rg(&[a, b]);
        if va.shape() == vb.shape() {
            let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| f(x, y)).collect();
            let t = Tensor::new(va.shape().to_vec(), data)?;
            let node = if op == "add" { Op::Add(a, b) } else { Op::Mul(a, b) };
            return Ok(self.push(t, node, rg));
        }
        if vb.ndim() == 1 && va.ndim() >= 1 && va.last_dim() == vb.len() {
            let c = vb.len();
            let data = va
                .data()
                .iter()
                .enumerate()
                .map(|(i, &x)| f(x, vb.data()[i % c]))
                .collect();
            let t = Tensor::new(va.shape().to_vec(), data)?;
            let node = if op == "add" { Op::AddRow(a, b) } else { Op::MulRow(a, b) };
            return Ok(self.push(t, node, rg));
        }
        Err(shape_err(op, va, vb))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let va = self.value(a);
        let t = Tensor::new(va.shape().to_vec(), va.data().iter().map(|x| x * s).collect())
            .expect("same shape");
        let rg = self.rg(&[a]);
        self.push(t, Op::Scale(a, s), rg)
    }

    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let va = self.value(a);
        if !va.is_finite() {
            return Err(FluxError::NonFinite("softmax input"));
        }
        let c = va.last_dim();
        let mut out = vec![0.0; va.len()];
        for (x, o) in va.data().chunks(c).zip(out.chunks_mut(c)) {
            kernels::softmax_row(x, o);
        }
        let t = Tensor::new(va.shape().to_vec(), out)?;
        let rg = self.rg(&[a]);
        Ok(self.push(t, Op::Softmax(a), rg))
    }

    /// Layer normalization over the last axis with learnable scale and shift.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let (vx, vg, vb) = (self.value(x), self.value(gamma), self.value(beta));
        let c = vx.last_dim();
        if vg.shape() != [c] || vb.shape() != [c] {
            return Err(shape_err("layer_norm", vx, vg));
        }
        let rows = vx.rows();
        let mut xhat = vec![0.0; vx.len()];
        let mut inv_std = vec![0.0; rows];
        let mut out = vec![0.0; vx.len()];
        for r in 0..rows {
            let row = &vx.data()[r * c..(r + 1) * c];
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
            let is = 1.0 / (var + LN_EPS).sqrt();
            inv_std[r] = is;
            for j in 0..c {
                let h = (row[j] - mean) * is;
                xhat[r * c + j] = h;
                out[r * c + j] = h * vg.data()[j] + vb.data()[j];
            }
        }
        let t = Tensor::new(vx.shape().to_vec(), out)?;
        let rg = self.rg(&[x, gamma, beta]);
        Ok(self.push(
            t,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            rg,
        ))
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let va = self.value(a);
        let t = Tensor::new(va.shape().to_vec(), va.data().iter().map(|&x| kernels::gelu(x)).collect())
            .expect("same shape");
        let rg = self.rg(&[a]);
        self.push(t, Op::Gelu(a), rg)
    }

    /// Depthwise 3-D convolution of a `[T,H,W,C]` grid with a `[kt,kh,kw,C]`
    /// kernel (odd extents, zero padding, output has the input's shape).
    pub fn dwconv3d(&mut self, x: Var, kernel: Var) -> Result<Var> {
        let (vx, vk) = (self.value(x), self.value(kernel));
        if vx.ndim() != 4 || vk.ndim() != 4 || vx.shape()[3] != vk.shape()[3] {
            return Err(shape_err("dwconv3d", vx, vk));
        }
        let k = [vk.shape()[0], vk.shape()[1], vk.shape()[2]];
        if k.iter().any(|&e| e % 2 == 0) {
            return Err(shape_err("dwconv3d (even kernel)", vx, vk));
        }
        let dims = [vx.shape()[0], vx.shape()[1], vx.shape()[2]];
        let out = kernels::dwconv3d(vx.data(), dims, vx.shape()[3], vk.data(), k);
        let t = Tensor::new(vx.shape().to_vec(), out)?;
        let rg = self.rg(&[x, kernel]);
        Ok(self.push(t, Op::DwConv3d { x, kernel, dims, k }, rg))
    }

    /// Gathers slices along axis 0.
    pub fn gather(&mut self, x: Var, indices: &[usize]) -> Result<Var> {
        let t = self.value(x).gather_rows(indices)?;
        let rg = self.rg(&[x]);
        Ok(self.push(
            t,
            Op::Gather {
                x,
                indices: indices.to_vec(),
            },
            rg,
        ))
    }

    /// Mean over `axis`, removing it.
    pub fn mean_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let vx = self.value(x);
        if axis >= vx.ndim() || vx.shape()[axis] == 0 {
            return Err(shape_err("mean_axis", vx, vx));
        }
        let (outer, len, inner) = split_axis(vx.shape(), axis);
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for l in 0..len {
                let src = &vx.data()[(o * len + l) * inner..(o * len + l + 1) * inner];
                for (d, s) in out[o * inner..(o + 1) * inner].iter_mut().zip(src) {
                    *d += s;
                }
            }
        }
        for v in out.iter_mut() {
            *v /= len as f64;
        }
        let mut shape = vx.shape().to_vec();
        shape.remove(axis);
        let t = Tensor::new(shape, out)?;
        let rg = self.rg(&[x]);
        Ok(self.push(t, Op::MeanAxis { x, outer, len, inner }, rg))
    }

    /// Concatenation along `axis`; all other extents must agree.
    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let first = self.value(inputs[0]).clone();
        if axis >= first.ndim() {
            return Err(shape_err("concat", &first, &first));
        }
        let (outer, _, inner) = split_axis(first.shape(), axis);
        let mut widths = Vec::with_capacity(inputs.len());
        for &v in inputs {
            let t = self.value(v);
            let same_rank = t.ndim() == first.ndim();
            let compatible = same_rank
                && t.shape()
                    .iter()
                    .zip(first.shape())
                    .enumerate()
                    .all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                return Err(shape_err("concat", &first, t));
            }
            widths.push(t.shape()[axis] * inner);
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(outer * total);
        for o in 0..outer {
            for (&v, &w) in inputs.iter().zip(&widths) {
                out.extend_from_slice(&self.value(v).data()[o * w..(o + 1) * w]);
            }
        }
        let mut shape = first.shape().to_vec();
        shape[axis] = total / inner.max(1);
        if inner == 0 {
            shape[axis] = inputs.iter().map(|&v| self.value(v).shape()[axis]).sum();
        }
        let t = Tensor::new(shape, out)?;
        let rg = self.rg(inputs);
        Ok(self.push(
            t,
            Op::Concat {
                inputs: inputs.to_vec(),
                outer,
                widths,
            },
            rg,
        ))
    }

    /// Slice `[start, start+len)` along `axis`.
    pub fn narrow(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let vx = self.value(x);
        if axis >= vx.ndim() || start + len > vx.shape()[axis] {
            return Err(FluxError::Shape {
                op: "narrow",
                lhs: vx.shape().to_vec(),
                rhs: vec![axis, start, len],
            });
        }
        let (outer, full, inner) = split_axis(vx.shape(), axis);
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * full + start) * inner;
            out.extend_from_slice(&vx.data()[base..base + len * inner]);
        }
        let mut shape = vx.shape().to_vec();
        shape[axis] = len;
        let t = Tensor::new(shape, out)?;
        let rg = self.rg(&[x]);
        Ok(self.push(
            t,
            Op::Narrow {
                x,
                outer,
                full: full * inner,
                start: start * inner,
                len: len * inner,
            },
            rg,
        ))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(x).reshape(shape)?;
        let rg = self.rg(&[x]);
        Ok(self.push(t, Op::Reshape(x), rg))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).sum();
        let rg = self.rg(&[x]);
        self.push(Tensor::scalar(s), Op::Sum(x), rg)
    }

    /// Mean smooth-L1 distance; quadratic below `beta`, linear above.
    pub fn smooth_l1(&mut self, a: Var, b: Var, beta: f64) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() || va.is_empty() {
            return Err(shape_err("smooth_l1", va, vb));
        }
        let n = va.len() as f64;
        let total: f64 = va
            .data()
            .iter()
            .zip(vb.data())
            .map(|(x, y)| {
                let d = (x - y).abs();
                if d < beta {
                    0.5 * d * d / beta
                } else {
                    d - 0.5 * beta
                }
            })
            .sum();
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::scalar(total / n), Op::SmoothL1 { a, b, beta }, rg))
    }

    /// Mean cross-entropy of `[B,C]` logits against integer labels.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let vl = self.value(logits);
        if vl.ndim() != 2 || vl.shape()[0] != labels.len() || labels.is_empty() {
            return Err(FluxError::Shape {
                op: "cross_entropy",
                lhs: vl.shape().to_vec(),
                rhs: vec![labels.len()],
            });
        }
        if !vl.is_finite() {
            return Err(FluxError::NonFinite("cross_entropy logits"));
        }
        let c = vl.shape()[1];
        if let Some(&bad) = labels.iter().find(|&&l| l >= c) {
            return Err(FluxError::InvalidInput(format!("label {bad} >= {c} classes")));
        }
        let mut probs = vec![0.0; vl.len()];
        let mut loss = 0.0;
        for (b, &label) in labels.iter().enumerate() {
            let row = vl.row(b);
            kernels::softmax_row(row, &mut probs[b * c..(b + 1) * c]);
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            loss += lse - row[label];
        }
        let rg = self.rg(&[logits]);
        Ok(self.push(
            Tensor::scalar(loss / labels.len() as f64),
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
            rg,
        ))
    }

    /// Divides each last-axis slice by its Euclidean norm (floored at 1e-12).
    pub fn l2_normalize(&mut self, x: Var) -> Var {
        let vx = self.value(x);
        let c = vx.last_dim();
        let mut norms = Vec::with_capacity(vx.rows());
        let mut out = vec![0.0; vx.len()];
        for (row, o) in vx.data().chunks(c).zip(out.chunks_mut(c)) {
            let n = row.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
            norms.push(n);
            for (d, s) in o.iter_mut().zip(row) {
                *d = s / n;
            }
        }
        let t = Tensor::new(vx.shape().to_vec(), out).expect("same shape");
        let rg = self.rg(&[x]);
        self.push(t, Op::L2Normalize { x, norms }, rg)
    }

    /// Trilinear (align-corners) resize of a `[T,H,W,C]` grid.
    pub fn resize3d(&mut self, x: Var, dst: [usize; 3]) -> Result<Var> {
        let vx = self.value(x);
        if vx.ndim() != 4 || dst.contains(&0) {
            return Err(FluxError::Shape {
                op: "resize3d",
                lhs: vx.shape().to_vec(),
                rhs: dst.to_vec(),
            });
        }
        let src = [vx.shape()[0], vx.shape()[1], vx.shape()[2]];
        let c = vx.shape()[3];
        let out = kernels::resize3d(vx.data(), src, dst, c);
        let t = Tensor::new(vec![dst[0], dst[1], dst[2], c], out)?;
        let rg = self.rg(&[x]);
        Ok(self.push(t, Op::Resize3d { x, src, dst }, rg))
    }

    /// Reverse sweep from a scalar node.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lv = self.value(loss);
        if lv.len() != 1 {
            return Err(FluxError::Shape {
                op: "backward",
                lhs: lv.shape().to_vec(),
                rhs: vec![],
            });
        }
        if !lv.is_finite() {
            return Err(FluxError::NonFinite("loss"));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(lv.shape(), 1.0));
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else {
                continue;
            };
            self.backward_node(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], v: Var, delta: Vec<f64>) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(g) => {
                for (a, d) in g.data_mut().iter_mut().zip(delta) {
                    *a += d;
                }
            }
            slot @ None => {
                let shape = self.nodes[v.0].value.shape().to_vec();
                *slot = Some(Tensor::new(shape, delta).expect("gradient shape"));
            }
        }
    }

    fn backward_node(&self, i: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let node = &self.nodes[i];
        let gd = g.data();
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                let (m, k) = (va.shape()[0], va.shape()[1]);
                let n = vb.shape()[1];
                if self.requires_grad(*a) {
                    let mut da = vec![0.0; m * k];
                    kernels::gemm_nt(gd, vb.data(), m, k, n, &mut da);
                    self.accumulate(grads, *a, da);
                }
                if self.requires_grad(*b) {
                    let mut db = vec![0.0; k * n];
                    kernels::gemm_tn(va.data(), gd, m, k, n, &mut db);
                    self.accumulate(grads, *b, db);
                }
            }
            Op::Transpose(a) => {
                let s = node.value.shape();
                self.accumulate(grads, *a, kernels::transpose(gd, s[0], s[1]));
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, gd.to_vec());
                self.accumulate(grads, *b, gd.to_vec());
            }
            Op::AddRow(a, b) => {
                self.accumulate(grads, *a, gd.to_vec());
                let c = self.value(*b).len();
                let mut db = vec![0.0; c];
                for row in gd.chunks(c) {
                    for (d, v) in db.iter_mut().zip(row) {
                        *d += v;
                    }
                }
                self.accumulate(grads, *b, db);
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                let da = gd.iter().zip(vb.data()).map(|(g, y)| g * y).collect();
                let db = gd.iter().zip(va.data()).map(|(g, x)| g * x).collect();
                self.accumulate(grads, *a, da);
                self.accumulate(grads, *b, db);
            }
            Op::MulRow(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                let c = vb.len();
                let da = gd
                    .iter()
                    .enumerate()
                    .map(|(j, g)| g * vb.data()[j % c])
                    .collect();
                let mut db = vec![0.0; c];
                for (j, (g, x)) in gd.iter().zip(va.data()).enumerate() {
                    db[j % c] += g * x;
                }
                self.accumulate(grads, *a, da);
                self.accumulate(grads, *b, db);
            }
            Op::Scale(a, s) => {
                self.accumulate(grads, *a, gd.iter().map(|g| g * s).collect());
            }
            Op::Softmax(a) => {
                let y = node.value.data();
                let c = node.value.last_dim();
                let mut dx = vec![0.0; y.len()];
                for ((yr, gr), dr) in y.chunks(c).zip(gd.chunks(c)).zip(dx.chunks_mut(c)) {
                    let dot: f64 = yr.iter().zip(gr).map(|(y, g)| y * g).sum();
                    for ((d, y), g) in dr.iter_mut().zip(yr).zip(gr) {
                        *d = y * (g - dot);
                    }
                }
                self.accumulate(grads, *a, dx);
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let vg = self.value(*gamma).data();
                let c = vg.len();
                let mut dgamma = vec![0.0; c];
                let mut dbeta = vec![0.0; c];
                let mut dx = vec![0.0; gd.len()];
                for (r, &is) in inv_std.iter().enumerate() {
                    let gr = &gd[r * c..(r + 1) * c];
                    let hr = &xhat[r * c..(r + 1) * c];
                    let mut sum_dh = 0.0;
                    let mut sum_dh_h = 0.0;
                    for j in 0..c {
                        dgamma[j] += gr[j] * hr[j];
                        dbeta[j] += gr[j];
                        let dh = gr[j] * vg[j];
                        sum_dh += dh;
                        sum_dh_h += dh * hr[j];
                    }
                    let cf = c as f64;
                    for j in 0..c {
                        let dh = gr[j] * vg[j];
                        dx[r * c + j] = is / cf * (cf * dh - sum_dh - hr[j] * sum_dh_h);
                    }
                }
                self.accumulate(grads, *x, dx);
                self.accumulate(grads, *gamma, dgamma);
                self.accumulate(grads, *beta, dbeta);
            }
            Op::Gelu(a) => {
                let va = self.value(*a);
                let dx = gd
                    .iter()
                    .zip(va.data())
                    .map(|(g, &x)| g * kernels::gelu_grad(x))
                    .collect();
                self.accumulate(grads, *a, dx);
            }
            Op::DwConv3d { x, kernel, dims, k } => {
                let (vx, vk) = (self.value(*x), self.value(*kernel));
                let c = vx.shape()[3];
                let mut dx = vec![0.0; vx.len()];
                let mut dk = vec![0.0; vk.len()];
                let (xd, kd) = (vx.data(), vk.data());
                kernels::dwconv3d_visit(*dims, c, *k, |xo, oo, ko| {
                    for ch in 0..c {
                        dx[xo + ch] += kd[ko + ch] * gd[oo + ch];
                        dk[ko + ch] += xd[xo + ch] * gd[oo + ch];
                    }
                });
                self.accumulate(grads, *x, dx);
                self.accumulate(grads, *kernel, dk);
            }
            Op::Gather { x, indices } => {
                let vx = self.value(*x);
                let inner = if vx.shape()[0] == 0 { 0 } else { vx.len() / vx.shape()[0] };
                let mut dx = vec![0.0; vx.len()];
                for (r, &idx) in indices.iter().enumerate() {
                    for j in 0..inner {
                        dx[idx * inner + j] += gd[r * inner + j];
                    }
                }
                self.accumulate(grads, *x, dx);
            }
            Op::MeanAxis { x, outer, len, inner } => {
                let mut dx = vec![0.0; outer * len * inner];
                let scale = 1.0 / *len as f64;
                for o in 0..*outer {
                    for l in 0..*len {
                        for j in 0..*inner {
                            dx[(o * len + l) * inner + j] = gd[o * inner + j] * scale;
                        }
                    }
                }
                self.accumulate(grads, *x, dx);
            }
            Op::Concat { inputs, outer, widths } => {
                let total: usize = widths.iter().sum();
                let mut offset = 0;
                for (&v, &w) in inputs.iter().zip(widths) {
                    let mut d = Vec::with_capacity(outer * w);
                    for o in 0..*outer {
                        d.extend_from_slice(&gd[o * total + offset..o * total + offset + w]);
                    }
                    self.accumulate(grads, v, d);
                    offset += w;
                }
            }
            Op::Narrow {
                x,
                outer,
                full,
                start,
                len,
            } => {
                let mut dx = vec![0.0; outer * full];
                for o in 0..*outer {
                    dx[o * full + start..o * full + start + len]
                        .copy_from_slice(&gd[o * len..(o + 1) * len]);
                }
                self.accumulate(grads, *x, dx);
            }
            Op::Reshape(x) => self.accumulate(grads, *x, gd.to_vec()),
            Op::Sum(x) => {
                let n = self.value(*x).len();
                self.accumulate(grads, *x, vec![gd[0]; n]);
            }
            Op::SmoothL1 { a, b, beta } => {
                let (va, vb) = (self.value(*a), self.value(*b));
                let n = va.len() as f64;
                let da: Vec<f64> = va
                    .data()
                    .iter()
                    .zip(vb.data())
                    .map(|(x, y)| {
                        let d = x - y;
                        let s = if d.abs() < *beta { d / beta } else { d.signum() };
                        gd[0] * s / n
                    })
                    .collect();
                let db = da.iter().map(|v| -v).collect();
                self.accumulate(grads, *a, da);
                self.accumulate(grads, *b, db);
            }
            Op::CrossEntropy {
                logits,
                labels,
                probs,
            } => {
                let c = probs.len() / labels.len();
                let scale = gd[0] / labels.len() as f64;
                let mut dl: Vec<f64> = probs.iter().map(|p| p * scale).collect();
                for (b, &l) in labels.iter().enumerate() {
                    dl[b * c + l] -= scale;
                }
                self.accumulate(grads, *logits, dl);
            }
            Op::L2Normalize { x, norms } => {
                let y = node.value.data();
                let c = node.value.last_dim();
                let mut dx = vec![0.0; y.len()];
                for (r, &n) in norms.iter().enumerate() {
                    let yr = &y[r * c..(r + 1) * c];
                    let gr = &gd[r * c..(r + 1) * c];
                    if n <= 1e-12 {
                        for j in 0..c {
                            dx[r * c + j] = gr[j] / n;
                        }
                        continue;
                    }
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for j in 0..c {
                        dx[r * c + j] = (gr[j] - yr[j] * dot) / n;
                    }
                }
                self.accumulate(grads, *x, dx);
            }
            Op::Resize3d { x, src, dst } => {
                let c = node.value.shape()[3];
                self.accumulate(grads, *x, kernels::resize3d_adjoint(gd, *src, *dst, c));
            }
        }
    }
}
