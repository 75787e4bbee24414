//! Raw loops shared by forward and backward passes.

/// `out += a[m,k] · b[k,n]`
pub(crate) fn gemm(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        let arow = &a[i * k..(i + 1) * k];
        for (p, &av) in arow.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

/// `out += a[m,k]ᵀ · c[m,n]`, giving `[k,n]`.
pub(crate) fn gemm_tn(a: &[f64], c: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let crow = &c[i * n..(i + 1) * n];
        for (p, &av) in arow.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let orow = &mut out[p * n..(p + 1) * n];
            for (o, &cv) in orow.iter_mut().zip(crow) {
                *o += av * cv;
            }
        }
    }
}

pub(crate) fn transpose(a: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; a.len()];
    for i in 0..rows {
        for j in 0..cols {
            out[j * rows + i] = a[i * cols + j];
        }
    }
    out
}

/// `out += c[m,n] · b[k,n]ᵀ`, giving `[m,k]`.
pub(crate) fn gemm_nt(c: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    let bt = transpose(b, k, n);
    gemm(c, &bt, m, n, k, out);
}

pub(crate) fn softmax_row(x: &[f64], out: &mut [f64]) {
    let max = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for (o, &v) in out.iter_mut().zip(x) {
        *o = (v - max).exp();
        sum += *o;
    }
    for o in out.iter_mut() {
        *o /= sum;
    }
}

pub(crate) const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

pub(crate) fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

pub(crate) fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    let du = GELU_C * (1.0 + 3.0 * 0.044715 * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
}

/// Interpolation taps for one axis with align-corners-true semantics.
pub(crate) fn linear_taps(input: usize, output: usize) -> Vec<(usize, usize, f64)> {
    (0..output)
        .map(|o| {
            if input == 1 || output == 1 {
                return (0, 0, 0.0);
            }
            let src = o as f64 * (input - 1) as f64 / (output - 1) as f64;
            let i0 = (src.floor() as usize).min(input - 1);
            let i1 = (i0 + 1).min(input - 1);
            let frac = src - i0 as f64;
            (i0, i1, frac)
        })
        .collect()
}

/// Trilinear resize of a `[T,H,W,C]` buffer.
pub(crate) fn resize3d(
    x: &[f64],
    src: [usize; 3],
    dst: [usize; 3],
    channels: usize,
) -> Vec<f64> {
    let tt = linear_taps(src[0], dst[0]);
    let th = linear_taps(src[1], dst[1]);
    let tw = linear_taps(src[2], dst[2]);
    let mut out = vec![0.0; dst[0] * dst[1] * dst[2] * channels];
    let idx = |t: usize, h: usize, w: usize| ((t * src[1] + h) * src[2] + w) * channels;
    for (ot, &(t0, t1, ft)) in tt.iter().enumerate() {
        for (oh, &(h0, h1, fh)) in th.iter().enumerate() {
            for (ow, &(w0, w1, fw)) in tw.iter().enumerate() {
                let o = ((ot * dst[1] + oh) * dst[2] + ow) * channels;
                for (ti, wt) in [(t0, 1.0 - ft), (t1, ft)] {
                    if wt == 0.0 {
                        continue;
                    }
                    for (hi, wh) in [(h0, 1.0 - fh), (h1, fh)] {
                        if wh == 0.0 {
                            continue;
                        }
                        for (wi, ww) in [(w0, 1.0 - fw), (w1, fw)] {
                            if ww == 0.0 {
                                continue;
                            }
                            let weight = wt * wh * ww;
                            let s = idx(ti, hi, wi);
                            for c in 0..channels {
                                out[o + c] += weight * x[s + c];
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

/// Adjoint of [`resize3d`]: scatters `grad` (dst-shaped) back to src.
pub(crate) fn resize3d_adjoint(
    grad: &[f64],
    src: [usize; 3],
    dst: [usize; 3],
    channels: usize,
) -> Vec<f64> {
    let tt = linear_taps(src[0], dst[0]);
    let th = linear_taps(src[1], dst[1]);
    let tw = linear_taps(src[2], dst[2]);
    let mut out = vec![0.0; src[0] * src[1] * src[2] * channels];
    let idx = |t: usize, h: usize, w: usize| ((t * src[1] + h) * src[2] + w) * channels;
    for (ot, &(t0, t1, ft)) in tt.iter().enumerate() {
        for (oh, &(h0, h1, fh)) in th.iter().enumerate() {
            for (ow, &(w0, w1, fw)) in tw.iter().enumerate() {
                let o = ((ot * dst[1] + oh) * dst[2] + ow) * channels;
                for (ti, wt) in [(t0, 1.0 - ft), (t1, ft)] {
                    if wt == 0.0 {
                        continue;
                    }
                    for (hi, wh) in [(h0, 1.0 - fh), (h1, fh)] {
                        if wh == 0.0 {
                            continue;
                        }
                        for (wi, ww) in [(w0, 1.0 - fw), (w1, fw)] {
                            if ww == 0.0 {
                                continue;
                            }
                            let weight = wt * wh * ww;
                            let s = idx(ti, hi, wi);
                            for c in 0..channels {
                                out[s + c] += weight * grad[o + c];
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

/// Depthwise 3-D convolution over `[T,H,W,C]` with zero "same" padding.
/// `kernel` is `[kt,kh,kw,C]` with odd extents.
pub(crate) fn dwconv3d(x: &[f64], dims: [usize; 3], c: usize, kernel: &[f64], k: [usize; 3]) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    dwconv3d_visit(dims, c, k, |xo, oo, ko| {
        for ch in 0..c {
            out[oo + ch] += kernel[ko + ch] * x[xo + ch];
        }
    });
    out
}

/// Calls `f(input_offset, output_offset, kernel_offset)` for every valid tap.
pub(crate) fn dwconv3d_visit(
    dims: [usize; 3],
    c: usize,
    k: [usize; 3],
    mut f: impl FnMut(usize, usize, usize),
) {
    let [t, h, w] = dims;
    let pad = [k[0] / 2, k[1] / 2, k[2] / 2];
    for ot in 0..t {
        for oh in 0..h {
            for ow in 0..w {
                let oo = ((ot * h + oh) * w + ow) * c;
                for a in 0..k[0] {
                    let it = ot as isize + a as isize - pad[0] as isize;
                    if it < 0 || it >= t as isize {
                        continue;
                    }
                    for b in 0..k[1] {
                        let ih = oh as isize + b as isize - pad[1] as isize;
                        if ih < 0 || ih >= h as isize {
                            continue;
                        }
                        for d in 0..k[2] {
                            let iw = ow as isize + d as isize - pad[2] as isize;
                            if iw < 0 || iw >= w as isize {
                                continue;
                            }
                            let xo = ((it as usize * h + ih as usize) * w + iw as usize) * c;
                            let ko = ((a * k[1] + b) * k[2] + d) * c;
                            f(xo, oo, ko);
                        }
                    }
                }
            }
        }
    }
}
