//! Batched layer kernels on `[batch, channels, height, width]` buffers.
//! Convolutions go through im2col and GEMM.

use ndarray::linalg::general_mat_mul;
use ndarray::ArrayView2;
use ndarray::ArrayViewMut2;

use super::{Scalar, Tensor};

/// Activation buffer, row-major `[b, c, h, w]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Act<F> {
    pub data: Vec<F>,
    pub b: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
}

impl<F: Scalar> Act<F> {
    pub fn zeros(b: usize, c: usize, h: usize, w: usize) -> Self {
        Act {
            data: vec![F::zero(); b * c * h * w],
            b,
            c,
            h,
            w,
        }
    }

    pub fn like(other: &Act<F>) -> Self {
        Act::zeros(other.b, other.c, other.h, other.w)
    }

    pub fn hw(&self) -> usize {
        self.h * self.w
    }

    pub fn sample(&self, i: usize) -> &[F] {
        let n = self.c * self.hw();
        &self.data[i * n..(i + 1) * n]
    }

    pub fn sample_mut(&mut self, i: usize) -> &mut [F] {
        let n = self.c * self.hw();
        &mut self.data[i * n..(i + 1) * n]
    }
}

/// `c = op(a) * op(b) + beta * c` where `op` optionally transposes.
/// `a` is stored `m x k` (or `k x m` when `ta`), `b` is `k x n` (or `n x k` when `tb`).
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm<F: Scalar>(ta: bool, tb: bool, m: usize, n: usize, k: usize, a: &[F], b: &[F], beta: F, c: &mut [F]) {
    let a = if ta {
        ArrayView2::from_shape((k, m), a).expect("gemm a").reversed_axes()
    } else {
        ArrayView2::from_shape((m, k), a).expect("gemm a")
    };
    let b = if tb {
        ArrayView2::from_shape((n, k), b).expect("gemm b").reversed_axes()
    } else {
        ArrayView2::from_shape((k, n), b).expect("gemm b")
    };
    let mut c = ArrayViewMut2::from_shape((m, n), c).expect("gemm c");
    general_mat_mul(F::one(), &a, &b, beta, &mut c);
}

/// im2col for a 3x3 kernel with zero padding 1. `col` is `[cin*9, h*w]`.
pub(crate) fn im2col_3x3<F: Scalar>(x: &[F], cin: usize, h: usize, w: usize, col: &mut [F]) {
    let hw = h * w;
    for ci in 0..cin {
        let plane = &x[ci * hw..(ci + 1) * hw];
        for ky in 0..3 {
            for kx in 0..3 {
                let row = &mut col[((ci * 9) + ky * 3 + kx) * hw..((ci * 9) + ky * 3 + kx + 1) * hw];
                for y in 0..h {
                    let out = &mut row[y * w..(y + 1) * w];
                    let sy = y as isize + ky as isize - 1;
                    if sy < 0 || sy >= h as isize {
                        out.fill(F::zero());
                        continue;
                    }
                    let src = &plane[sy as usize * w..(sy as usize + 1) * w];
                    match kx {
                        0 => {
                            out[0] = F::zero();
                            out[1..].copy_from_slice(&src[..w - 1]);
                        }
                        1 => out.copy_from_slice(src),
                        _ => {
                            out[..w - 1].copy_from_slice(&src[1..]);
                            out[w - 1] = F::zero();
                        }
                    }
                }
            }
        }
    }
}

pub(crate) fn col2im_3x3<F: Scalar>(col: &[F], cin: usize, h: usize, w: usize, dx: &mut [F]) {
    let hw = h * w;
    for ci in 0..cin {
        let plane = &mut dx[ci * hw..(ci + 1) * hw];
        for ky in 0..3 {
            for kx in 0..3 {
                let row = &col[((ci * 9) + ky * 3 + kx) * hw..((ci * 9) + ky * 3 + kx + 1) * hw];
                for y in 0..h {
                    let sy = y as isize + ky as isize - 1;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let src = &row[y * w..(y + 1) * w];
                    let dst = &mut plane[sy as usize * w..(sy as usize + 1) * w];
                    match kx {
                        0 => dst[..w - 1].iter_mut().zip(&src[1..]).for_each(|(d, s)| *d = *d + *s),
                        1 => dst.iter_mut().zip(src).for_each(|(d, s)| *d = *d + *s),
                        _ => dst[1..].iter_mut().zip(&src[..w - 1]).for_each(|(d, s)| *d = *d + *s),
                    }
                }
            }
        }
    }
}

fn kernel_size<F>(weight: &Tensor<F>) -> usize {
    weight.shape[2]
}

/// Convolution with a 3x3 (padding 1) or 1x1 kernel; weight is `[cout, cin, k, k]`.
/// Returns the output and, when `record`, the im2col buffer for the backward pass.
/// A 1x1 kernel needs no buffer: its input already has the column layout.
pub fn conv_forward<F: Scalar>(x: &Act<F>, weight: &Tensor<F>, bias: &Tensor<F>, record: bool) -> (Act<F>, Vec<F>) {
    let (cout, cin, k) = (weight.shape[0], weight.shape[1], kernel_size(weight));
    debug_assert_eq!(cin, x.c);
    let hw = x.hw();
    let kk = cin * k * k;
    let mut out = Act::zeros(x.b, cout, x.h, x.w);
    let mut cols = if record && k == 3 { vec![F::zero(); x.b * kk * hw] } else { Vec::new() };
    let mut scratch = if !record && k == 3 { vec![F::zero(); kk * hw] } else { Vec::new() };
    for i in 0..x.b {
        let col: &[F] = if k == 1 {
            x.sample(i)
        } else if record {
            let slot = &mut cols[i * kk * hw..(i + 1) * kk * hw];
            im2col_3x3(x.sample(i), cin, x.h, x.w, slot);
            slot
        } else {
            im2col_3x3(x.sample(i), cin, x.h, x.w, &mut scratch);
            &scratch
        };
        let o = out.sample_mut(i);
        for (co, plane) in o.chunks_exact_mut(hw).enumerate() {
            plane.fill(bias.data[co]);
        }
        gemm(false, false, cout, hw, kk, &weight.data, col, F::one(), o);
    }
    (out, cols)
}

/// Accumulates weight/bias gradients and returns the input gradient when `need_dx`.
pub fn conv_backward<F: Scalar>(
    cols: &[F],
    input_dims: (usize, usize, usize, usize),
    weight: &Tensor<F>,
    dout: &Act<F>,
    dweight: &mut Tensor<F>,
    dbias: &mut Tensor<F>,
    need_dx: bool,
) -> Option<Act<F>> {
    let (b, cin, h, w) = input_dims;
    let (cout, k) = (weight.shape[0], kernel_size(weight));
    let hw = h * w;
    let kk = cin * k * k;
    let mut dx = if need_dx { Some(Act::zeros(b, cin, h, w)) } else { None };
    let mut dcol = if need_dx && k == 3 { vec![F::zero(); kk * hw] } else { Vec::new() };
    for i in 0..b {
        let col = &cols[i * kk * hw..(i + 1) * kk * hw];
        let d = dout.sample(i);
        gemm(false, true, cout, kk, hw, d, col, F::one(), &mut dweight.data);
        for (co, plane) in d.chunks_exact(hw).enumerate() {
            dbias.data[co] = dbias.data[co] + plane.iter().fold(F::zero(), |acc, &v| acc + v);
        }
        if let Some(dx) = dx.as_mut() {
            if k == 1 {
                gemm(true, false, kk, hw, cout, &weight.data, d, F::zero(), dx.sample_mut(i));
            } else {
                gemm(true, false, kk, hw, cout, &weight.data, d, F::zero(), &mut dcol);
                col2im_3x3(&dcol, cin, h, w, dx.sample_mut(i));
            }
        }
    }
    dx
}

pub const NORM_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Default)]
pub struct NormCache<F> {
    pub xhat: Vec<F>,
    pub inv_std: Vec<F>,
}

/// Group normalization with per-channel affine parameters.
pub fn group_norm_forward<F: Scalar>(
    x: &Act<F>,
    gamma: &Tensor<F>,
    beta: &Tensor<F>,
    groups: usize,
    record: bool,
) -> (Act<F>, NormCache<F>) {
    let hw = x.hw();
    let per_group = x.c / groups;
    let n = F::from(per_group * hw).expect("count");
    let eps = F::from(NORM_EPS).expect("eps");
    let mut out = Act::like(x);
    let mut cache = NormCache {
        xhat: if record { vec![F::zero(); x.data.len()] } else { Vec::new() },
        inv_std: if record { vec![F::zero(); x.b * groups] } else { Vec::new() },
    };
    for i in 0..x.b {
        for g in 0..groups {
            let start = (i * x.c + g * per_group) * hw;
            let end = start + per_group * hw;
            let xs = &x.data[start..end];
            let mean = xs.iter().fold(F::zero(), |a, &v| a + v) / n;
            let var = xs.iter().fold(F::zero(), |a, &v| a + (v - mean) * (v - mean)) / n;
            let inv = F::one() / (var + eps).sqrt();
            if record {
                cache.inv_std[i * groups + g] = inv;
            }
            for (ci, (chunk, out_chunk)) in xs
                .chunks_exact(hw)
                .zip(out.data[start..end].chunks_exact_mut(hw))
                .enumerate()
            {
                let c = g * per_group + ci;
                let (ga, be) = (gamma.data[c], beta.data[c]);
                for (j, (&v, o)) in chunk.iter().zip(out_chunk.iter_mut()).enumerate() {
                    let xhat = (v - mean) * inv;
                    if record {
                        cache.xhat[start + ci * hw + j] = xhat;
                    }
                    *o = ga * xhat + be;
                }
            }
        }
    }
    (out, cache)
}

pub fn group_norm_backward<F: Scalar>(
    dy: &Act<F>,
    gamma: &Tensor<F>,
    cache: &NormCache<F>,
    groups: usize,
    dgamma: &mut Tensor<F>,
    dbeta: &mut Tensor<F>,
) -> Act<F> {
    let hw = dy.hw();
    let per_group = dy.c / groups;
    let n = F::from(per_group * hw).expect("count");
    let mut dx = Act::like(dy);
    for i in 0..dy.b {
        for g in 0..groups {
            let start = (i * dy.c + g * per_group) * hw;
            let mut sum_dxhat = F::zero();
            let mut sum_dxhat_xhat = F::zero();
            for ci in 0..per_group {
                let c = g * per_group + ci;
                let off = start + ci * hw;
                let mut dg = F::zero();
                let mut db = F::zero();
                for j in off..off + hw {
                    let d = dy.data[j];
                    let xh = cache.xhat[j];
                    dg = dg + d * xh;
                    db = db + d;
                    let dxh = d * gamma.data[c];
                    sum_dxhat = sum_dxhat + dxh;
                    sum_dxhat_xhat = sum_dxhat_xhat + dxh * xh;
                }
                dgamma.data[c] = dgamma.data[c] + dg;
                dbeta.data[c] = dbeta.data[c] + db;
            }
            let inv = cache.inv_std[i * groups + g];
            let scale = inv / n;
            for ci in 0..per_group {
                let c = g * per_group + ci;
                let off = start + ci * hw;
                for j in off..off + hw {
                    let dxh = dy.data[j] * gamma.data[c];
                    dx.data[j] = scale * (n * dxh - sum_dxhat - cache.xhat[j] * sum_dxhat_xhat);
                }
            }
        }
    }
    dx
}

pub fn relu_inplace<F: Scalar>(x: &mut Act<F>) {
    for v in x.data.iter_mut() {
        if *v < F::zero() {
            *v = F::zero();
        }
    }
}

/// Zeroes `dy` wherever the forward output was not positive.
pub fn relu_backward_inplace<F: Scalar>(dy: &mut Act<F>, y: &Act<F>) {
    for (d, &v) in dy.data.iter_mut().zip(&y.data) {
        if v <= F::zero() {
            *d = F::zero();
        }
    }
}

/// 2x2 max pooling with stride 2; also returns the flat input index of each maximum.
pub fn max_pool_forward<F: Scalar>(x: &Act<F>) -> (Act<F>, Vec<u32>) {
    let (oh, ow) = (x.h / 2, x.w / 2);
    let mut out = Act::zeros(x.b, x.c, oh, ow);
    let mut idx = vec![0u32; out.data.len()];
    for plane in 0..x.b * x.c {
        let base = plane * x.h * x.w;
        for y in 0..oh {
            for xx in 0..ow {
                let mut best = base + 2 * y * x.w + 2 * xx;
                for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                    let cand = base + (2 * y + dy) * x.w + 2 * xx + dx;
                    if x.data[cand] > x.data[best] {
                        best = cand;
                    }
                }
                let o = plane * oh * ow + y * ow + xx;
                out.data[o] = x.data[best];
                idx[o] = best as u32;
            }
        }
    }
    (out, idx)
}

pub fn max_pool_backward<F: Scalar>(dy: &Act<F>, idx: &[u32], input_dims: (usize, usize, usize, usize)) -> Act<F> {
    let (b, c, h, w) = input_dims;
    let mut dx = Act::zeros(b, c, h, w);
    for (&d, &i) in dy.data.iter().zip(idx) {
        dx.data[i as usize] = dx.data[i as usize] + d;
    }
    dx
}

/// 2x2 stride-2 transposed convolution; weight is `[cin, cout, 2, 2]`.
pub fn up_conv_forward<F: Scalar>(x: &Act<F>, weight: &Tensor<F>, bias: &Tensor<F>) -> Act<F> {
    let (cin, cout) = (weight.shape[0], weight.shape[1]);
    let hw = x.hw();
    let (oh, ow) = (2 * x.h, 2 * x.w);
    let mut out = Act::zeros(x.b, cout, oh, ow);
    let mut tmp = vec![F::zero(); cout * 4 * hw];
    for i in 0..x.b {
        gemm(true, false, cout * 4, hw, cin, &weight.data, x.sample(i), F::zero(), &mut tmp);
        let o = out.sample_mut(i);
        for co in 0..cout {
            for a in 0..2 {
                for bb in 0..2 {
                    let row = &tmp[(co * 4 + a * 2 + bb) * hw..(co * 4 + a * 2 + bb + 1) * hw];
                    for y in 0..x.h {
                        for xx in 0..x.w {
                            o[co * oh * ow + (2 * y + a) * ow + 2 * xx + bb] = row[y * x.w + xx] + bias.data[co];
                        }
                    }
                }
            }
        }
    }
    out
}

pub fn up_conv_backward<F: Scalar>(
    x: &Act<F>,
    weight: &Tensor<F>,
    dout: &Act<F>,
    dweight: &mut Tensor<F>,
    dbias: &mut Tensor<F>,
) -> Act<F> {
    let (cin, cout) = (weight.shape[0], weight.shape[1]);
    let hw = x.hw();
    let (oh, ow) = (dout.h, dout.w);
    let mut dx = Act::like(x);
    let mut dtmp = vec![F::zero(); cout * 4 * hw];
    for i in 0..x.b {
        let d = dout.sample(i);
        for co in 0..cout {
            let mut db = F::zero();
            for a in 0..2 {
                for bb in 0..2 {
                    let row = &mut dtmp[(co * 4 + a * 2 + bb) * hw..(co * 4 + a * 2 + bb + 1) * hw];
                    for y in 0..x.h {
                        for xx in 0..x.w {
                            let v = d[co * oh * ow + (2 * y + a) * ow + 2 * xx + bb];
                            row[y * x.w + xx] = v;
                            db = db + v;
                        }
                    }
                }
            }
            dbias.data[co] = dbias.data[co] + db;
        }
        gemm(false, true, cin, cout * 4, hw, x.sample(i), &dtmp, F::one(), &mut dweight.data);
        gemm(false, false, cin, hw, cout * 4, &weight.data, &dtmp, F::zero(), dx.sample_mut(i));
    }
    dx
}

/// Channel concatenation `[a, b]`.
pub fn concat<F: Scalar>(a: &Act<F>, b: &Act<F>) -> Act<F> {
    let mut out = Act::zeros(a.b, a.c + b.c, a.h, a.w);
    let (na, nb) = (a.c * a.hw(), b.c * b.hw());
    for i in 0..a.b {
        let o = out.sample_mut(i);
        o[..na].copy_from_slice(a.sample(i));
        o[na..na + nb].copy_from_slice(b.sample(i));
    }
    out
}

/// Inverse of [`concat`]: splits off the first `c_first` channels.
pub fn split_channels<F: Scalar>(x: &Act<F>, c_first: usize) -> (Act<F>, Act<F>) {
    let mut a = Act::zeros(x.b, c_first, x.h, x.w);
    let mut b = Act::zeros(x.b, x.c - c_first, x.h, x.w);
    let na = c_first * x.hw();
    for i in 0..x.b {
        let s = x.sample(i);
        a.sample_mut(i).copy_from_slice(&s[..na]);
        b.sample_mut(i).copy_from_slice(&s[na..]);
    }
    (a, b)
}

/// Per-pixel softmax over channels.
pub fn softmax<F: Scalar>(logits: &Act<F>) -> Act<F> {
    let hw = logits.hw();
    let c = logits.c;
    let mut out = Act::like(logits);
    for i in 0..logits.b {
        let l = logits.sample(i);
        let o = &mut out.data[i * c * hw..(i + 1) * c * hw];
        for p in 0..hw {
            let mut max = l[p];
            for k in 1..c {
                max = max.max(l[k * hw + p]);
            }
            let mut sum = F::zero();
            for k in 0..c {
                let e = (l[k * hw + p] - max).exp();
                o[k * hw + p] = e;
                sum = sum + e;
            }
            for k in 0..c {
                o[k * hw + p] = o[k * hw + p] / sum;
            }
        }
    }
    out
}

/// Maps a gradient w.r.t. softmax probabilities to one w.r.t. the logits.
pub fn softmax_backward<F: Scalar>(probs: &[F], dprobs: &[F], b: usize, c: usize, hw: usize) -> Vec<F> {
    let mut dl = vec![F::zero(); probs.len()];
    for i in 0..b {
        let base = i * c * hw;
        for p in 0..hw {
            let mut dot = F::zero();
            for k in 0..c {
                dot = dot + probs[base + k * hw + p] * dprobs[base + k * hw + p];
            }
            for k in 0..c {
                let j = base + k * hw + p;
                dl[j] = probs[j] * (dprobs[j] - dot);
            }
        }
    }
    dl
}
