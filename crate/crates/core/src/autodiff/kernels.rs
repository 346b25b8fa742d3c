//! Forward and backward kernels over raw slices.
//!
//! Everything here is shape-checked by the caller in `graph.rs`.

/// Output extent of a convolution along one spatial axis.
pub(crate) fn conv_out_len(input: usize, kernel: usize, stride: usize, pad: usize) -> Option<usize> {
    let padded = input + 2 * pad;
    if padded < kernel || stride == 0 {
        return None;
    }
    Some((padded - kernel) / stride + 1)
}

/// Geometry of one 2-D convolution.
#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvGeom {
    pub n: usize,
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub c_out: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub oh: usize,
    pub ow: usize,
}

impl ConvGeom {
    /// Valid output columns for kernel column `kj`: the `ow` range whose input
    /// column `ow * stride + kj - pad` lands inside `[0, w)`.
    fn col_range(&self, kj: usize) -> (usize, usize) {
        valid_range(self.ow, self.w, self.stride, kj, self.pad)
    }

    fn row_range(&self, ki: usize) -> (usize, usize) {
        valid_range(self.oh, self.h, self.stride, ki, self.pad)
    }
}

fn valid_range(out_len: usize, in_len: usize, stride: usize, k: usize, pad: usize) -> (usize, usize) {
    // smallest o with o*stride + k >= pad
    let lo = if k >= pad { 0 } else { (pad - k).div_ceil(stride) };
    // largest o with o*stride + k - pad < in_len
    let hi = if in_len + pad <= k {
        0
    } else {
        ((in_len + pad - k - 1) / stride + 1).min(out_len)
    };
    (lo.min(hi), hi)
}

pub(crate) fn conv2d_forward(g: &ConvGeom, input: &[f64], kernel: &[f64], bias: Option<&[f64]>) -> Vec<f64> {
    let out_plane = g.oh * g.ow;
    let in_plane = g.h * g.w;
    let mut out = vec![0.0; g.n * g.c_out * out_plane];
    for n in 0..g.n {
        for o in 0..g.c_out {
            let out_off = (n * g.c_out + o) * out_plane;
            let dst = &mut out[out_off..out_off + out_plane];
            if let Some(b) = bias {
                dst.iter_mut().for_each(|v| *v = b[o]);
            }
            for c in 0..g.c_in {
                let src = &input[(n * g.c_in + c) * in_plane..][..in_plane];
                for ki in 0..g.kh {
                    let (r0, r1) = g.row_range(ki);
                    for kj in 0..g.kw {
                        let wv = kernel[((o * g.c_in + c) * g.kh + ki) * g.kw + kj];
                        let (c0, c1) = g.col_range(kj);
                        if c0 >= c1 {
                            continue;
                        }
                        for oh in r0..r1 {
                            let ih = oh * g.stride + ki - g.pad;
                            let drow = &mut dst[oh * g.ow..(oh + 1) * g.ow];
                            let srow = &src[ih * g.w..(ih + 1) * g.w];
                            if g.stride == 1 {
                                let iw0 = c0 + kj - g.pad;
                                for (d, s) in drow[c0..c1].iter_mut().zip(&srow[iw0..iw0 + (c1 - c0)]) {
                                    *d += wv * s;
                                }
                            } else {
                                for ow in c0..c1 {
                                    drow[ow] += wv * srow[ow * g.stride + kj - g.pad];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

/// Returns (grad_input, grad_kernel, grad_bias).
pub(crate) fn conv2d_backward(
    g: &ConvGeom,
    input: &[f64],
    kernel: &[f64],
    grad_out: &[f64],
    need_input: bool,
    need_kernel: bool,
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let out_plane = g.oh * g.ow;
    let in_plane = g.h * g.w;
    let mut gi = if need_input { vec![0.0; input.len()] } else { Vec::new() };
    let mut gk = if need_kernel { vec![0.0; kernel.len()] } else { Vec::new() };
    let mut gb = vec![0.0; g.c_out];
    for n in 0..g.n {
        for o in 0..g.c_out {
            let gout = &grad_out[(n * g.c_out + o) * out_plane..][..out_plane];
            gb[o] += gout.iter().sum::<f64>();
            for c in 0..g.c_in {
                let in_off = (n * g.c_in + c) * in_plane;
                for ki in 0..g.kh {
                    let (r0, r1) = g.row_range(ki);
                    for kj in 0..g.kw {
                        let kidx = ((o * g.c_in + c) * g.kh + ki) * g.kw + kj;
                        let wv = kernel[kidx];
                        let (c0, c1) = g.col_range(kj);
                        if c0 >= c1 {
                            continue;
                        }
                        let mut acc = 0.0;
                        for oh in r0..r1 {
                            let ih = oh * g.stride + ki - g.pad;
                            let grow = &gout[oh * g.ow..(oh + 1) * g.ow];
                            let row_off = in_off + ih * g.w;
                            if g.stride == 1 {
                                let iw0 = c0 + kj - g.pad;
                                let len = c1 - c0;
                                if need_kernel {
                                    acc += grow[c0..c1]
                                        .iter()
                                        .zip(&input[row_off + iw0..row_off + iw0 + len])
                                        .map(|(a, b)| a * b)
                                        .sum::<f64>();
                                }
                                if need_input {
                                    for (d, s) in gi[row_off + iw0..row_off + iw0 + len].iter_mut().zip(&grow[c0..c1]) {
                                        *d += wv * s;
                                    }
                                }
                            } else {
                                for ow in c0..c1 {
                                    let iw = ow * g.stride + kj - g.pad;
                                    if need_kernel {
                                        acc += grow[ow] * input[row_off + iw];
                                    }
                                    if need_input {
                                        gi[row_off + iw] += wv * grow[ow];
                                    }
                                }
                            }
                        }
                        if need_kernel {
                            gk[kidx] += acc;
                        }
                    }
                }
            }
        }
    }
    (gi, gk, gb)
}

/// `[m,k] x [k,n]`.
pub(crate) fn matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            for (d, bv) in row.iter_mut().zip(&b[p * n..(p + 1) * n]) {
                *d += av * bv;
            }
        }
    }
    out
}

/// `a^T` for a row-major `[rows, cols]` matrix.
pub(crate) fn transpose(a: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; a.len()];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = a[r * cols + c];
        }
    }
    out
}

/// Bilinear resize with aligned corners: output pixel `o` samples input
/// coordinate `o * (in - 1) / (out - 1)`.
#[derive(Clone, Debug)]
pub(crate) struct ResizeTable {
    /// (lower index, upper index, upper weight) per output coordinate
    pub taps: Vec<(usize, usize, f64)>,
}

impl ResizeTable {
    pub fn new(in_len: usize, out_len: usize) -> Self {
        let taps = (0..out_len)
            .map(|o| {
                if out_len == 1 || in_len == 1 {
                    return (0, 0, 0.0);
                }
                let num = o * (in_len - 1);
                let den = out_len - 1;
                let lo = num / den;
                let rem = num % den;
                if rem == 0 {
                    (lo, lo, 0.0)
                } else {
                    (lo, lo + 1, rem as f64 / den as f64)
                }
            })
            .collect();
        ResizeTable { taps }
    }
}

pub(crate) fn resize_forward(
    input: &[f64],
    planes: usize,
    (h, w): (usize, usize),
    rows: &ResizeTable,
    cols: &ResizeTable,
) -> Vec<f64> {
    let (oh, ow) = (rows.taps.len(), cols.taps.len());
    let mut out = vec![0.0; planes * oh * ow];
    for p in 0..planes {
        let src = &input[p * h * w..(p + 1) * h * w];
        let dst = &mut out[p * oh * ow..(p + 1) * oh * ow];
        for (y, &(y0, y1, fy)) in rows.taps.iter().enumerate() {
            for (x, &(x0, x1, fx)) in cols.taps.iter().enumerate() {
                let top = src[y0 * w + x0] * (1.0 - fx) + src[y0 * w + x1] * fx;
                let bot = src[y1 * w + x0] * (1.0 - fx) + src[y1 * w + x1] * fx;
                dst[y * ow + x] = top * (1.0 - fy) + bot * fy;
            }
        }
    }
    out
}

pub(crate) fn resize_backward(
    grad_out: &[f64],
    planes: usize,
    (h, w): (usize, usize),
    rows: &ResizeTable,
    cols: &ResizeTable,
) -> Vec<f64> {
    let (oh, ow) = (rows.taps.len(), cols.taps.len());
    let mut gi = vec![0.0; planes * h * w];
    for p in 0..planes {
        let g = &grad_out[p * oh * ow..(p + 1) * oh * ow];
        let dst = &mut gi[p * h * w..(p + 1) * h * w];
        for (y, &(y0, y1, fy)) in rows.taps.iter().enumerate() {
            for (x, &(x0, x1, fx)) in cols.taps.iter().enumerate() {
                let gv = g[y * ow + x];
                dst[y0 * w + x0] += gv * (1.0 - fy) * (1.0 - fx);
                dst[y0 * w + x1] += gv * (1.0 - fy) * fx;
                dst[y1 * w + x0] += gv * fy * (1.0 - fx);
                dst[y1 * w + x1] += gv * fy * fx;
            }
        }
    }
    gi
}

/// Non-overlapping average pooling with window = stride = `k`.
pub(crate) fn avg_pool_forward(input: &[f64], planes: usize, (h, w): (usize, usize), k: usize) -> Vec<f64> {
    let (oh, ow) = (h / k, w / k);
    let scale = 1.0 / (k * k) as f64;
    let mut out = vec![0.0; planes * oh * ow];
    for p in 0..planes {
        let src = &input[p * h * w..(p + 1) * h * w];
        let dst = &mut out[p * oh * ow..(p + 1) * oh * ow];
        for y in 0..oh * k {
            let row = &src[y * w..y * w + ow * k];
            let drow = &mut dst[(y / k) * ow..(y / k + 1) * ow];
            for (x, v) in row.iter().enumerate() {
                drow[x / k] += v;
            }
        }
        dst.iter_mut().for_each(|v| *v *= scale);
    }
    out
}

pub(crate) fn avg_pool_backward(grad_out: &[f64], planes: usize, (h, w): (usize, usize), k: usize) -> Vec<f64> {
    let (oh, ow) = (h / k, w / k);
    let scale = 1.0 / (k * k) as f64;
    let mut gi = vec![0.0; planes * h * w];
    for p in 0..planes {
        let g = &grad_out[p * oh * ow..(p + 1) * oh * ow];
        let dst = &mut gi[p * h * w..(p + 1) * h * w];
        for y in 0..oh * k {
            for x in 0..ow * k {
                dst[y * w + x] = g[(y / k) * ow + x / k] * scale;
            }
        }
    }
    gi
}

/// Numerically stable softmax over groups laid out as `[outer, axis, inner]`.
pub(crate) fn softmax(input: &[f64], outer: usize, axis: usize, inner: usize) -> Vec<f64> {
    let mut out = vec![0.0; input.len()];
    for o in 0..outer {
        for i in 0..inner {
            let idx = |a: usize| (o * axis + a) * inner + i;
            let max = (0..axis).map(|a| input[idx(a)]).fold(f64::NEG_INFINITY, f64::max);
            let mut total = 0.0;
            for a in 0..axis {
                let e = (input[idx(a)] - max).exp();
                out[idx(a)] = e;
                total += e;
            }
            for a in 0..axis {
                out[idx(a)] /= total;
            }
        }
    }
    out
}

pub(crate) fn softmax_backward(y: &[f64], grad_out: &[f64], outer: usize, axis: usize, inner: usize) -> Vec<f64> {
    let mut gi = vec![0.0; y.len()];
    for o in 0..outer {
        for i in 0..inner {
            let idx = |a: usize| (o * axis + a) * inner + i;
            let dot: f64 = (0..axis).map(|a| y[idx(a)] * grad_out[idx(a)]).sum();
            for a in 0..axis {
                gi[idx(a)] = y[idx(a)] * (grad_out[idx(a)] - dot);
            }
        }
    }
    gi
}

/// Mean softmax cross-entropy over `[n, classes]` logits; also returns the
/// row-wise softmax for the backward pass.
pub(crate) fn cross_entropy(logits: &[f64], labels: &[usize], classes: usize) -> (f64, Vec<f64>) {
    let n = labels.len();
    let probs = softmax(logits, n, classes, 1);
    let mut total = 0.0;
    for (r, &y) in labels.iter().enumerate() {
        let row = &logits[r * classes..(r + 1) * classes];
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        total += lse - row[y];
    }
    (total / n as f64, probs)
}

/// Strides for `shape` with broadcast (size-1) axes of `src` zeroed.
pub(crate) fn broadcast_strides(src: &[usize], out: &[usize]) -> Vec<usize> {
    let mut strides = vec![0; src.len()];
    let mut acc = 1;
    for d in (0..src.len()).rev() {
        strides[d] = if src[d] == 1 && out[d] != 1 { 0 } else { acc };
        acc *= src[d];
    }
    strides
}

/// Visits every output index, yielding (out offset, a offset, b offset).
pub(crate) fn for_each_broadcast(
    out_shape: &[usize],
    a_strides: &[usize],
    b_strides: &[usize],
    mut f: impl FnMut(usize, usize, usize),
) {
    let rank = out_shape.len();
    let total: usize = out_shape.iter().product();
    let mut idx = vec![0usize; rank];
    let (mut ao, mut bo) = (0usize, 0usize);
    for flat in 0..total {
        f(flat, ao, bo);
        for d in (0..rank).rev() {
            idx[d] += 1;
            ao += a_strides[d];
            bo += b_strides[d];
            if idx[d] < out_shape[d] {
                break;
            }
            ao -= a_strides[d] * out_shape[d];
            bo -= b_strides[d] * out_shape[d];
            idx[d] = 0;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn valid_range_matches_bruteforce() {
        for in_len in 1..7 {
            for k in 0..4 {
                for pad in 0..3 {
                    for stride in 1..3 {
                        let Some(out_len) = conv_out_len(in_len, k + 1, stride, pad) else {
                            continue;
                        };
                        let (lo, hi) = valid_range(out_len, in_len, stride, k, pad);
                        let expect: Vec<usize> = (0..out_len)
                            .filter(|&o| {
                                let pos = (o * stride + k) as isize - pad as isize;
                                pos >= 0 && (pos as usize) < in_len
                            })
                            .collect();
                        let got: Vec<usize> = (lo..hi).collect();
                        assert_eq!(got, expect, "in={in_len} k={k} pad={pad} s={stride}");
                    }
                }
            }
        }
    }

    #[test]
    fn resize_identity_when_same_size() {
        let t = ResizeTable::new(5, 5);
        assert!(t.taps.iter().enumerate().all(|(i, &(a, b, f))| a == i && b == i && f == 0.0));
    }
}
