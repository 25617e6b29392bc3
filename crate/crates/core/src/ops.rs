//! Forward and backward kernels on plain tensors.
//!
//! Reductions accumulate in ascending index order starting from zero; that
//! order is part of the contract since goldens are compared bit-for-bit.
//! Parallel loops only split work across independent output elements, so the
//! thread count never changes a result.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

const PAR_MIN: usize = 1 << 14;

/// Output extent of a convolution along one axis.
pub fn conv_out_extent(input: usize, kernel: usize, stride: usize, padding: usize) -> Option<usize> {
    let padded = input + 2 * padding;
    if stride == 0 || padded < kernel {
        return None;
    }
    Some((padded - kernel) / stride + 1)
}

struct ConvGeom {
    n: usize,
    cin: usize,
    h: usize,
    w: usize,
    cout: usize,
    kh: usize,
    kw: usize,
    oh: usize,
    ow: usize,
    stride: usize,
    pad: usize,
}

fn conv_geom<T: Scalar>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    stride: usize,
    pad: usize,
) -> Result<ConvGeom> {
    let (xs, ws) = (x.shape(), weight.shape());
    if xs.len() != 4 || ws.len() != 4 {
        return Err(Error::shape(
            "conv2d",
            format!("input {xs:?} and weights {ws:?} must both be rank 4"),
        ));
    }
    if xs[1] != ws[1] {
        return Err(Error::shape(
            "conv2d",
            format!(
                "input {xs:?} has {} channels but weights {ws:?} expect {}",
                xs[1], ws[1]
            ),
        ));
    }
    if let Some(b) = bias {
        if b.shape() != [ws[0]] {
            return Err(Error::shape(
                "conv2d",
                format!("bias {:?} does not match weights {ws:?}", b.shape()),
            ));
        }
    }
    let oh = conv_out_extent(xs[2], ws[2], stride, pad);
    let ow = conv_out_extent(xs[3], ws[3], stride, pad);
    let (Some(oh), Some(ow)) = (oh, ow) else {
        return Err(Error::invalid(
            "conv2d",
            format!("kernel {ws:?} with stride {stride}, padding {pad} does not fit input {xs:?}"),
        ));
    };
    Ok(ConvGeom {
        n: xs[0],
        cin: xs[1],
        h: xs[2],
        w: xs[3],
        cout: ws[0],
        kh: ws[2],
        kw: ws[3],
        oh,
        ow,
        stride,
        pad,
    })
}

impl ConvGeom {
    /// Output positions `o` whose input index `o*stride + k - pad` is in range.
    fn valid(&self, k: usize, out: usize, input: usize) -> (usize, usize) {
        let s = self.stride;
        // smallest o with o*s + k >= pad
        let lo = if k >= self.pad { 0 } else { (self.pad - k).div_ceil(s) };
        // largest o with o*s + k - pad <= input - 1
        let hi = if input + self.pad > k {
            ((input + self.pad - 1 - k) / s + 1).min(out)
        } else {
            0
        };
        (lo, hi.max(lo))
    }
}

impl ConvGeom {
    fn taps(&self) -> usize {
        self.cin * self.kh * self.kw
    }

    fn out_plane(&self) -> usize {
        self.oh * self.ow
    }

    /// Unfold one image `[Cin,H,W]` into columns `[Cin·kh·kw, OH·OW]`;
    /// padded taps are zero.
    fn im2col<T: Scalar>(&self, img: &[T]) -> Vec<T> {
        let p = self.out_plane();
        let mut cols = vec![T::zero(); self.taps() * p];
        for ci in 0..self.cin {
            let plane = &img[ci * self.h * self.w..][..self.h * self.w];
            for ky in 0..self.kh {
                let (oy0, oy1) = self.valid(ky, self.oh, self.h);
                for kx in 0..self.kw {
                    let (ox0, ox1) = self.valid(kx, self.ow, self.w);
                    let row = &mut cols[((ci * self.kh + ky) * self.kw + kx) * p..][..p];
                    for oy in oy0..oy1 {
                        let iy = oy * self.stride + ky - self.pad;
                        let src = &plane[iy * self.w..][..self.w];
                        let dst = &mut row[oy * self.ow..][..self.ow];
                        for ox in ox0..ox1 {
                            dst[ox] = src[ox * self.stride + kx - self.pad];
                        }
                    }
                }
            }
        }
        cols
    }

    /// Scatter-add columns back onto an image `[Cin,H,W]`.
    fn col2im<T: Scalar>(&self, cols: &[T], img: &mut [T]) {
        let p = self.out_plane();
        for ci in 0..self.cin {
            let plane = &mut img[ci * self.h * self.w..][..self.h * self.w];
            for ky in 0..self.kh {
                let (oy0, oy1) = self.valid(ky, self.oh, self.h);
                for kx in 0..self.kw {
                    let (ox0, ox1) = self.valid(kx, self.ow, self.w);
                    let row = &cols[((ci * self.kh + ky) * self.kw + kx) * p..][..p];
                    for oy in oy0..oy1 {
                        let iy = oy * self.stride + ky - self.pad;
                        let src = &row[oy * self.ow..][..self.ow];
                        let dst = &mut plane[iy * self.w..][..self.w];
                        for ox in ox0..ox1 {
                            let e = &mut dst[ox * self.stride + kx - self.pad];
                            *e = *e + src[ox];
                        }
                    }
                }
            }
        }
    }
}

/// Cross-correlation `[N,Cin,H,W] * [Cout,Cin,kh,kw] (+ bias) -> [N,Cout,OH,OW]`.
///
/// Each output sums its taps in `(ci, ky, kx)` order, padded taps
/// contributing exact zeros, and adds the bias last.
pub fn conv2d<T: Scalar>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    stride: usize,
    padding: usize,
) -> Result<Tensor<T>> {
    let g = conv_geom(x, weight, bias, stride, padding)?;
    let in_size = g.cin * g.h * g.w;
    let p = g.out_plane();
    let mut out = vec![T::zero(); g.n * g.cout * p];
    let per_image = |(n, o): (usize, &mut [T])| {
        let cols = g.im2col(&x.data()[n * in_size..][..in_size]);
        o.copy_from_slice(&mm_nn(weight.data(), &cols, g.cout, g.taps(), p));
        if let Some(b) = bias {
            for (plane, &bv) in o.chunks_mut(p).zip(b.data()) {
                for v in plane {
                    *v = *v + bv;
                }
            }
        }
    };
    if g.n > 1 && g.cout * g.taps() * p >= PAR_MIN {
        out.par_chunks_mut(g.cout * p).enumerate().for_each(per_image);
    } else {
        out.chunks_mut(g.cout * p).enumerate().for_each(per_image);
    }
    Tensor::new(vec![g.n, g.cout, g.oh, g.ow], out)
}

/// Gradients of [`conv2d`] with respect to input, weights and (optionally) bias.
pub fn conv2d_backward<T: Scalar>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    with_bias: bool,
    stride: usize,
    padding: usize,
    grad_out: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>, Option<Tensor<T>>)> {
    let g = conv_geom(x, weight, None, stride, padding)?;
    let in_size = g.cin * g.h * g.w;
    let p = g.out_plane();
    let go = grad_out.data();
    if go.len() != g.n * g.cout * p {
        return Err(Error::shape(
            "conv2d_backward",
            format!("gradient {:?} does not match the output of input {:?}", grad_out.shape(), x.shape()),
        ));
    }

    // Per image: the weight gradient contribution and the input gradient.
    let per_image = |n: usize| {
        let gon = &go[n * g.cout * p..][..g.cout * p];
        let cols = g.im2col(&x.data()[n * in_size..][..in_size]);
        let gw = mm_nt(gon, &cols, g.cout, p, g.taps());
        let gcols = mm_tn(weight.data(), gon, g.taps(), g.cout, p);
        let mut gx = vec![T::zero(); in_size];
        g.col2im(&gcols, &mut gx);
        (gw, gx)
    };
    let parts: Vec<(Vec<T>, Vec<T>)> = if g.n > 1 && g.cout * g.taps() * p >= PAR_MIN {
        (0..g.n).into_par_iter().map(per_image).collect()
    } else {
        (0..g.n).map(per_image).collect()
    };

    let mut gw = vec![T::zero(); weight.len()];
    let mut gx = Vec::with_capacity(x.len());
    for (pw, px) in parts {
        for (a, b) in gw.iter_mut().zip(pw) {
            *a = *a + b;
        }
        gx.extend(px);
    }

    let gb = with_bias.then(|| {
        let mut gb = vec![T::zero(); g.cout];
        for n in 0..g.n {
            for (co, b) in gb.iter_mut().enumerate() {
                for &v in &go[(n * g.cout + co) * p..][..p] {
                    *b = *b + v;
                }
            }
        }
        Tensor::new(vec![g.cout], gb).expect("bias shape")
    });
    Ok((
        Tensor::new(x.shape().to_vec(), gx)?,
        Tensor::new(weight.shape().to_vec(), gw)?,
        gb,
    ))
}

/// `out[i,j] = sum_k a[i,k] * b[k,j]` for row-major `a: [m,k]`, `b: [k,n]`.
pub fn mm_nn<T: Scalar>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let mut out = vec![T::zero(); m * n];
    let row = |(i, orow): (usize, &mut [T])| {
        let arow = &a[i * k..][..k];
        for (kk, &av) in arow.iter().enumerate() {
            let brow = &b[kk * n..][..n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o = *o + av * bv;
            }
        }
    };
    if m * k * n >= PAR_MIN {
        out.par_chunks_mut(n).enumerate().for_each(row);
    } else {
        out.chunks_mut(n).enumerate().for_each(row);
    }
    out
}

/// `out[i,j] = sum_k a[i,k] * b[j,k]` for `a: [m,k]`, `b: [n,k]`.
pub fn mm_nt<T: Scalar>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let mut out = vec![T::zero(); m * n];
    let row = |(i, orow): (usize, &mut [T])| {
        let arow = &a[i * k..][..k];
        for (j, o) in orow.iter_mut().enumerate() {
            let brow = &b[j * k..][..k];
            let mut acc = T::zero();
            for (&av, &bv) in arow.iter().zip(brow) {
                acc = acc + av * bv;
            }
            *o = acc;
        }
    };
    if m * k * n >= PAR_MIN {
        out.par_chunks_mut(n).enumerate().for_each(row);
    } else {
        out.chunks_mut(n).enumerate().for_each(row);
    }
    out
}

/// `out[i,j] = sum_k a[k,i] * b[k,j]` for `a: [k,m]`, `b: [k,n]`.
pub fn mm_tn<T: Scalar>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let mut out = vec![T::zero(); m * n];
    let row = |(i, orow): (usize, &mut [T])| {
        for kk in 0..k {
            let av = a[kk * m + i];
            let brow = &b[kk * n..][..n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o = *o + av * bv;
            }
        }
    };
    if m * k * n >= PAR_MIN {
        out.par_chunks_mut(n).enumerate().for_each(row);
    } else {
        out.chunks_mut(n).enumerate().for_each(row);
    }
    out
}

/// Affine map `x · w + b` for `x: [N,Din]`, `w: [Din,Dout]`, `b: [Dout]`.
///
/// Each output accumulates `x[i,k]·w[k,j]` for ascending `k` from zero, then
/// adds the bias.
pub fn linear<T: Scalar>(x: &Tensor<T>, w: &Tensor<T>, b: Option<&Tensor<T>>) -> Result<Tensor<T>> {
    let (xs, ws) = (x.shape(), w.shape());
    if xs.len() != 2 || ws.len() != 2 || xs[1] != ws[0] {
        return Err(Error::shape(
            "linear",
            format!("input {xs:?} is incompatible with weights {ws:?}"),
        ));
    }
    let (n, din, dout) = (xs[0], xs[1], ws[1]);
    if let Some(b) = b {
        if b.shape() != [dout] {
            return Err(Error::shape(
                "linear",
                format!("bias {:?} does not match weights {ws:?}", b.shape()),
            ));
        }
    }
    let mut out = mm_nn(x.data(), w.data(), n, din, dout);
    if let Some(b) = b {
        for row in out.chunks_mut(dout) {
            for (o, &bv) in row.iter_mut().zip(b.data()) {
                *o = *o + bv;
            }
        }
    }
    Tensor::new(vec![n, dout], out)
}

/// Gradients of [`linear`]: `(d input, d weights, d bias)`.
pub fn linear_backward<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    with_bias: bool,
    grad_out: &Tensor<T>,
) -> (Tensor<T>, Tensor<T>, Option<Tensor<T>>) {
    let (n, din, dout) = (x.shape()[0], x.shape()[1], w.shape()[1]);
    let go = grad_out.data();
    let gx = mm_nt(go, w.data(), n, dout, din);
    let gw = mm_tn(x.data(), go, din, n, dout);
    let gb = with_bias.then(|| {
        let mut gb = vec![T::zero(); dout];
        for row in go.chunks(dout) {
            for (b, &v) in gb.iter_mut().zip(row) {
                *b = *b + v;
            }
        }
        Tensor::new(vec![dout], gb).expect("bias shape")
    });
    (
        Tensor::new(vec![n, din], gx).expect("shape"),
        Tensor::new(vec![din, dout], gw).expect("shape"),
        gb,
    )
}

fn batch_dims(op: &'static str, t: &Tensor<impl Scalar>) -> Result<(usize, usize, usize)> {
    match *t.shape() {
        [b, m, k] => Ok((b, m, k)),
        [m, k] => Ok((1, m, k)),
        ref s => Err(Error::shape(op, format!("expected rank 2 or 3, got {s:?}"))),
    }
}

/// Batched `a · b` for `a: [B,M,K]`, `b: [B,K,N]`.
pub fn bmm<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (ba, m, k) = batch_dims("bmm", a)?;
    let (bb, k2, n) = batch_dims("bmm", b)?;
    if ba != bb || k != k2 {
        return Err(Error::shape(
            "bmm",
            format!("{:?} x {:?}", a.shape(), b.shape()),
        ));
    }
    let mut out = Vec::with_capacity(ba * m * n);
    for i in 0..ba {
        out.extend(mm_nn(
            &a.data()[i * m * k..][..m * k],
            &b.data()[i * k * n..][..k * n],
            m,
            k,
            n,
        ));
    }
    let shape = if a.ndim() == 3 { vec![ba, m, n] } else { vec![m, n] };
    Tensor::new(shape, out)
}

/// Gradients of [`bmm`].
pub fn bmm_backward<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>, grad_out: &Tensor<T>) -> (Tensor<T>, Tensor<T>) {
    let (ba, m, k) = batch_dims("bmm", a).expect("checked in forward");
    let n = b.shape()[b.ndim() - 1];
    let go = grad_out.data();
    let mut ga = Vec::with_capacity(a.len());
    let mut gb = Vec::with_capacity(b.len());
    for i in 0..ba {
        let gi = &go[i * m * n..][..m * n];
        let ai = &a.data()[i * m * k..][..m * k];
        let bi = &b.data()[i * k * n..][..k * n];
        ga.extend(mm_nt(gi, bi, m, n, k));
        gb.extend(mm_tn(ai, gi, k, m, n));
    }
    (
        Tensor::new(a.shape().to_vec(), ga).expect("shape"),
        Tensor::new(b.shape().to_vec(), gb).expect("shape"),
    )
}

/// Attention logits for `q, k: [B,L,dh]` (or `[L,dh]`).
///
/// `score[i][l] = q_i·k_l / sqrt(dh)`; when `delta` is given, every
/// off-diagonal entry is additionally multiplied by it. `None` is the path
/// without any scaler.
pub fn scaled_scores<T: Scalar>(q: &Tensor<T>, k: &Tensor<T>, delta: Option<T>) -> Result<Tensor<T>> {
    let (bq, lq, dq) = batch_dims("scaled_scores", q)?;
    let (bk, lk, dk) = batch_dims("scaled_scores", k)?;
    if bq != bk || dq != dk || lq != lk {
        return Err(Error::shape(
            "scaled_scores",
            format!("queries {:?} vs keys {:?}", q.shape(), k.shape()),
        ));
    }
    let (l, dh) = (lq, dq);
    let root = T::lit(dh as f64).sqrt();
    let mut out = Vec::with_capacity(bq * l * l);
    for b in 0..bq {
        let dots = mm_nt(&q.data()[b * l * dh..][..l * dh], &k.data()[b * l * dh..][..l * dh], l, dh, l);
        for (idx, dot) in dots.into_iter().enumerate() {
            let s = dot / root;
            out.push(match delta {
                Some(d) if idx / l != idx % l => d * s,
                _ => s,
            });
        }
    }
    let shape = if q.ndim() == 3 { vec![bq, l, l] } else { vec![l, l] };
    Tensor::new(shape, out)
}

/// Gradients of [`scaled_scores`] with respect to `q` and `k`.
pub fn scaled_scores_backward<T: Scalar>(
    q: &Tensor<T>,
    k: &Tensor<T>,
    delta: Option<T>,
    grad_out: &Tensor<T>,
) -> (Tensor<T>, Tensor<T>) {
    let (bq, l, dh) = batch_dims("scaled_scores", q).expect("checked in forward");
    let root = T::lit(dh as f64).sqrt();
    let mut gd: Vec<T> = grad_out.data().iter().map(|&g| g / root).collect();
    if let Some(d) = delta {
        for (idx, g) in gd.iter_mut().enumerate() {
            let r = idx % (l * l);
            if r / l != r % l {
                *g = *g * d;
            }
        }
    }
    let mut gq = Vec::with_capacity(q.len());
    let mut gk = Vec::with_capacity(k.len());
    for b in 0..bq {
        let g = &gd[b * l * l..][..l * l];
        let qb = &q.data()[b * l * dh..][..l * dh];
        let kb = &k.data()[b * l * dh..][..l * dh];
        gq.extend(mm_nn(g, kb, l, l, dh));
        gk.extend(mm_tn(g, qb, l, l, dh));
    }
    (
        Tensor::new(q.shape().to_vec(), gq).expect("shape"),
        Tensor::new(k.shape().to_vec(), gk).expect("shape"),
    )
}

/// Softmax over the trailing axis with max subtraction.
pub fn softmax_rows<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    let l = *x.shape().last().expect("rank >= 1");
    let mut out = x.data().to_vec();
    for row in out.chunks_mut(l) {
        let m = row.iter().copied().fold(T::neg_infinity(), T::max);
        let mut sum = T::zero();
        for v in row.iter_mut() {
            *v = (*v - m).exp();
            sum = sum + *v;
        }
        for v in row.iter_mut() {
            *v = *v / sum;
        }
    }
    Tensor::new(x.shape().to_vec(), out).expect("shape")
}

/// Gradient of [`softmax_rows`] given its output `y`.
pub fn softmax_rows_backward<T: Scalar>(y: &Tensor<T>, grad_out: &Tensor<T>) -> Tensor<T> {
    let l = *y.shape().last().expect("rank >= 1");
    let mut gx = Vec::with_capacity(y.len());
    for (yr, gr) in y.data().chunks(l).zip(grad_out.data().chunks(l)) {
        let dot = yr.iter().zip(gr).fold(T::zero(), |a, (&y, &g)| a + y * g);
        gx.extend(yr.iter().zip(gr).map(|(&y, &g)| y * (g - dot)));
    }
    Tensor::new(y.shape().to_vec(), gx).expect("shape")
}

/// Per-position statistics saved by [`layer_norm`] for the backward pass.
#[derive(Debug, Clone)]
pub struct LayerNormCache<T: Scalar> {
    pub normalized: Tensor<T>,
    pub rstd: Vec<T>,
}

/// Normalize the trailing axis to zero mean and unit (biased) variance, then
/// apply `gain` and `shift`.
pub fn layer_norm<T: Scalar>(
    x: &Tensor<T>,
    gain: &Tensor<T>,
    shift: &Tensor<T>,
    eps: T,
) -> Result<(Tensor<T>, LayerNormCache<T>)> {
    let c = *x.shape().last().expect("rank >= 1");
    if gain.shape() != [c] || shift.shape() != [c] {
        return Err(Error::shape(
            "layer_norm",
            format!(
                "input {:?} needs gain/shift of [{c}], got {:?}/{:?}",
                x.shape(),
                gain.shape(),
                shift.shape()
            ),
        ));
    }
    let cf = T::lit(c as f64);
    let mut xhat = Vec::with_capacity(x.len());
    let mut out = Vec::with_capacity(x.len());
    let mut rstds = Vec::with_capacity(x.len() / c);
    for row in x.data().chunks(c) {
        let mean = row.iter().copied().fold(T::zero(), |a, v| a + v) / cf;
        let var = row
            .iter()
            .fold(T::zero(), |a, &v| a + (v - mean) * (v - mean))
            / cf;
        let rstd = T::one() / (var + eps).sqrt();
        rstds.push(rstd);
        for (j, &v) in row.iter().enumerate() {
            let h = (v - mean) * rstd;
            xhat.push(h);
            out.push(h * gain.data()[j] + shift.data()[j]);
        }
    }
    let shape = x.shape().to_vec();
    Ok((
        Tensor::new(shape.clone(), out)?,
        LayerNormCache {
            normalized: Tensor::new(shape, xhat)?,
            rstd: rstds,
        },
    ))
}

/// Gradients of [`layer_norm`]: `(d input, d gain, d shift)`.
pub fn layer_norm_backward<T: Scalar>(
    cache: &LayerNormCache<T>,
    gain: &Tensor<T>,
    grad_out: &Tensor<T>,
) -> (Tensor<T>, Tensor<T>, Tensor<T>) {
    let c = gain.len();
    let cf = T::lit(c as f64);
    let mut gx = Vec::with_capacity(grad_out.len());
    let mut gg = vec![T::zero(); c];
    let mut gs = vec![T::zero(); c];
    for ((xr, gr), &rstd) in cache
        .normalized
        .data()
        .chunks(c)
        .zip(grad_out.data().chunks(c))
        .zip(&cache.rstd)
    {
        let mut sum_g = T::zero();
        let mut sum_gx = T::zero();
        for j in 0..c {
            gg[j] = gg[j] + gr[j] * xr[j];
            gs[j] = gs[j] + gr[j];
            let gh = gr[j] * gain.data()[j];
            sum_g = sum_g + gh;
            sum_gx = sum_gx + gh * xr[j];
        }
        let mg = sum_g / cf;
        let mgx = sum_gx / cf;
        for j in 0..c {
            let gh = gr[j] * gain.data()[j];
            gx.push(rstd * (gh - mg - xr[j] * mgx));
        }
    }
    (
        Tensor::new(grad_out.shape().to_vec(), gx).expect("shape"),
        Tensor::new(vec![c], gg).expect("shape"),
        Tensor::new(vec![c], gs).expect("shape"),
    )
}

fn gelu_inner<T: Scalar>(x: T) -> (T, T) {
    let k = T::lit((2.0 / std::f64::consts::PI).sqrt());
    let a = T::lit(0.044715);
    let u = k * (x + a * x * x * x);
    let du = k * (T::one() + T::lit(3.0) * a * x * x);
    (u, du)
}

/// GELU, tanh approximation.
pub fn gelu<T: Scalar>(x: T) -> T {
    let (u, _) = gelu_inner(x);
    T::lit(0.5) * x * (T::one() + u.tanh())
}

pub fn gelu_grad<T: Scalar>(x: T) -> T {
    let (u, du) = gelu_inner(x);
    let t = u.tanh();
    T::lit(0.5) * (T::one() + t) + T::lit(0.5) * x * (T::one() - t * t) * du
}
