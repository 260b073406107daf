//! Array kernels behind the tape ops: im2col convolution, normalization,
//! bilinear resampling, softmax family, gate-patch expansion.

use super::{PatchRegion, Scalar};
use crate::runtime::indexed_map;
use ndarray::{ArrayD, ArrayView3, Ix2, Ix4, IxDyn};

pub(crate) fn conv_out_size(i: usize, k: usize, stride: usize, pad: usize, dilation: usize) -> usize {
    (i + 2 * pad - dilation * (k - 1) - 1) / stride + 1
}

fn im2col<T: Scalar>(
    x: &ArrayView3<T>,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    dilation: usize,
    oh: usize,
    ow: usize,
) -> ndarray::Array2<T> {
    let (c_in, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let xs = x.as_slice().expect("im2col: non-contiguous input");
    let mut col = ndarray::Array2::<T>::zeros((c_in * kh * kw, oh * ow));
    let cs = col.as_slice_mut().unwrap();
    for c in 0..c_in {
        for ki in 0..kh {
            for kj in 0..kw {
                let row = (c * kh + ki) * kw + kj;
                let row_off = row * oh * ow;
                for oy in 0..oh {
                    let iy = (oy * stride + ki * dilation) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let x_off = (c * h + iy as usize) * w;
                    let o_off = row_off + oy * ow;
                    if stride == 1 {
                        // contiguous span of valid ox
                        let shift = kj as isize * dilation as isize - pad as isize;
                        let ox_lo = (-shift).max(0) as usize;
                        let ox_hi = ((w as isize - shift).min(ow as isize)).max(0) as usize;
                        if ox_lo < ox_hi {
                            let src_lo = (ox_lo as isize + shift) as usize;
                            cs[o_off + ox_lo..o_off + ox_hi]
                                .copy_from_slice(&xs[x_off + src_lo..x_off + src_lo + (ox_hi - ox_lo)]);
                        }
                    } else {
                        for ox in 0..ow {
                            let ix = (ox * stride + kj * dilation) as isize - pad as isize;
                            if ix >= 0 && ix < w as isize {
                                cs[o_off + ox] = xs[x_off + ix as usize];
                            }
                        }
                    }
                }
            }
        }
    }
    col
}

fn col2im<T: Scalar>(
    col: &ndarray::Array2<T>,
    c_in: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    dilation: usize,
    oh: usize,
    ow: usize,
) -> ndarray::Array3<T> {
    let mut x = ndarray::Array3::<T>::zeros((c_in, h, w));
    let xs = x.as_slice_mut().unwrap();
    let cs = col.as_slice().unwrap();
    for c in 0..c_in {
        for ki in 0..kh {
            for kj in 0..kw {
                let row = (c * kh + ki) * kw + kj;
                let row_off = row * oh * ow;
                for oy in 0..oh {
                    let iy = (oy * stride + ki * dilation) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let x_off = (c * h + iy as usize) * w;
                    let o_off = row_off + oy * ow;
                    for ox in 0..ow {
                        let ix = (ox * stride + kj * dilation) as isize - pad as isize;
                        if ix >= 0 && ix < w as isize {
                            xs[x_off + ix as usize] = xs[x_off + ix as usize] + cs[o_off + ox];
                        }
                    }
                }
            }
        }
    }
    x
}

pub(crate) fn conv2d_forward<T: Scalar>(
    x: &ArrayD<T>,
    w: &ArrayD<T>,
    b: Option<&ArrayD<T>>,
    stride: usize,
    pad: usize,
    dilation: usize,
) -> ArrayD<T> {
    let xv = x.view().into_dimensionality::<Ix4>().unwrap();
    let wv = w.view().into_dimensionality::<Ix4>().unwrap();
    let (n, _c_in, h, win) = (xv.shape()[0], xv.shape()[1], xv.shape()[2], xv.shape()[3]);
    let (c_out, c_in_w, kh, kw) = (wv.shape()[0], wv.shape()[1], wv.shape()[2], wv.shape()[3]);
    assert_eq!(xv.shape()[1], c_in_w, "conv2d: channel mismatch");
    let oh = conv_out_size(h, kh, stride, pad, dilation);
    let ow = conv_out_size(win, kw, stride, pad, dilation);
    let w2 = wv
        .into_shape_with_order((c_out, c_in_w * kh * kw))
        .unwrap();

    let per_image: Vec<ndarray::Array2<T>> = indexed_map(n, |i| {
        let xi = xv.index_axis(ndarray::Axis(0), i);
        let col = im2col(&xi, kh, kw, stride, pad, dilation, oh, ow);
        let mut out = w2.dot(&col);
        if let Some(b) = b {
            let bs = b.as_slice().unwrap();
            for (co, mut row) in out.outer_iter_mut().enumerate() {
                row.mapv_inplace(|v| v + bs[co]);
            }
        }
        out
    });

    let mut out = ndarray::Array4::<T>::zeros((n, c_out, oh, ow));
    for (i, o) in per_image.into_iter().enumerate() {
        out.index_axis_mut(ndarray::Axis(0), i)
            .into_shape_with_order((c_out, oh * ow))
            .unwrap()
            .assign(&o);
    }
    out.into_dyn()
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn conv2d_backward<T: Scalar>(
    x: &ArrayD<T>,
    w: &ArrayD<T>,
    g: &ArrayD<T>,
    stride: usize,
    pad: usize,
    dilation: usize,
    dx_slot: Option<usize>,
    dw_slot: Option<usize>,
    db_slot: Option<usize>,
    grads: &mut [Option<ArrayD<T>>],
) {
    let xv = x.view().into_dimensionality::<Ix4>().unwrap();
    let wv = w.view().into_dimensionality::<Ix4>().unwrap();
    let gv = g.view().into_dimensionality::<Ix4>().unwrap();
    let (n, c_in, h, win) = (xv.shape()[0], xv.shape()[1], xv.shape()[2], xv.shape()[3]);
    let (c_out, _, kh, kw) = (wv.shape()[0], wv.shape()[1], wv.shape()[2], wv.shape()[3]);
    let (oh, ow) = (gv.shape()[2], gv.shape()[3]);
    let w2 = wv.into_shape_with_order((c_out, c_in * kh * kw)).unwrap();

    let want_dx = dx_slot.is_some();
    let want_dw = dw_slot.is_some();

    // per-image partials, then reduce in index order for determinism
    let parts: Vec<(Option<ndarray::Array2<T>>, Option<ndarray::Array3<T>>)> = indexed_map(n, |i| {
        let gi = gv
            .index_axis(ndarray::Axis(0), i)
            .into_shape_with_order((c_out, oh * ow))
            .unwrap();
        let xi = xv.index_axis(ndarray::Axis(0), i);
        let col = im2col(&xi, kh, kw, stride, pad, dilation, oh, ow);
        let dw_i = if want_dw { Some(gi.dot(&col.t())) } else { None };
        let dx_i = if want_dx {
            let dcol = w2.t().dot(&gi);
            Some(col2im(&dcol, c_in, h, win, kh, kw, stride, pad, dilation, oh, ow))
        } else {
            None
        };
        (dw_i, dx_i)
    });

    if let Some(slot) = dw_slot {
        let mut dw = ndarray::Array2::<T>::zeros((c_out, c_in * kh * kw));
        for (dw_i, _) in &parts {
            dw += dw_i.as_ref().unwrap();
        }
        let dw = dw
            .into_shape_with_order((c_out, c_in, kh, kw))
            .unwrap()
            .into_dyn();
        super::add_into(&mut grads[slot], dw);
    }
    if let Some(slot) = dx_slot {
        let mut dx = ndarray::Array4::<T>::zeros((n, c_in, h, win));
        for (i, (_, dx_i)) in parts.iter().enumerate() {
            dx.index_axis_mut(ndarray::Axis(0), i)
                .assign(dx_i.as_ref().unwrap());
        }
        super::add_into(&mut grads[slot], dx.into_dyn());
    }
    if let Some(slot) = db_slot {
        let mut db = ndarray::Array1::<T>::zeros(c_out);
        for i in 0..n {
            for co in 0..c_out {
                let mut s = T::zero();
                for v in gv.index_axis(ndarray::Axis(0), i).index_axis(ndarray::Axis(0), co) {
                    s = s + *v;
                }
                db[co] = db[co] + s;
            }
        }
        super::add_into(&mut grads[slot], db.into_dyn());
    }
}

// ---- batch norm ----

type BnForward<T> = (ArrayD<T>, Vec<T>, Vec<T>, Vec<T>);

pub(crate) fn batchnorm_forward<T: Scalar>(
    x: &ArrayD<T>,
    gamma: &ArrayD<T>,
    beta: &ArrayD<T>,
    eps: T,
) -> BnForward<T> {
    let xv = x.view().into_dimensionality::<Ix4>().unwrap();
    let (n, c, h, w) = (xv.shape()[0], xv.shape()[1], xv.shape()[2], xv.shape()[3]);
    let m = T::from_usize(n * h * w).unwrap();
    let gs = gamma.as_slice().unwrap();
    let bs = beta.as_slice().unwrap();
    let mut mean = vec![T::zero(); c];
    let mut var = vec![T::zero(); c];
    for ci in 0..c {
        let mut s = T::zero();
        for ni in 0..n {
            for v in xv.index_axis(ndarray::Axis(0), ni).index_axis(ndarray::Axis(0), ci) {
                s = s + *v;
            }
        }
        let mu = s / m;
        let mut s2 = T::zero();
        for ni in 0..n {
            for v in xv.index_axis(ndarray::Axis(0), ni).index_axis(ndarray::Axis(0), ci) {
                let d = *v - mu;
                s2 = s2 + d * d;
            }
        }
        mean[ci] = mu;
        var[ci] = s2 / m;
    }
    let invstd: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
    let mut y = ndarray::Array4::<T>::zeros((n, c, h, w));
    for ni in 0..n {
        for ci in 0..c {
            let (mu, is, ga, be) = (mean[ci], invstd[ci], gs[ci], bs[ci]);
            let xi = xv.index_axis(ndarray::Axis(0), ni);
            let xi = xi.index_axis(ndarray::Axis(0), ci);
            let mut yi = y.index_axis_mut(ndarray::Axis(0), ni);
            let mut yi = yi.index_axis_mut(ndarray::Axis(0), ci);
            ndarray::Zip::from(&mut yi).and(&xi).for_each(|o, &v| {
                *o = ga * (v - mu) * is + be;
            });
        }
    }
    (y.into_dyn(), mean, var, invstd)
}

pub(crate) fn batchnorm_eval_forward<T: Scalar>(
    x: &ArrayD<T>,
    gamma: &ArrayD<T>,
    beta: &ArrayD<T>,
    mean: &[T],
    invstd: &[T],
) -> ArrayD<T> {
    let xv = x.view().into_dimensionality::<Ix4>().unwrap();
    let (n, c, h, w) = (xv.shape()[0], xv.shape()[1], xv.shape()[2], xv.shape()[3]);
    let gs = gamma.as_slice().unwrap();
    let bs = beta.as_slice().unwrap();
    let mut y = ndarray::Array4::<T>::zeros((n, c, h, w));
    for ni in 0..n {
        for ci in 0..c {
            let (mu, is, ga, be) = (mean[ci], invstd[ci], gs[ci], bs[ci]);
            let xi = xv.index_axis(ndarray::Axis(0), ni);
            let xi = xi.index_axis(ndarray::Axis(0), ci);
            let mut yi = y.index_axis_mut(ndarray::Axis(0), ni);
            let mut yi = yi.index_axis_mut(ndarray::Axis(0), ci);
            ndarray::Zip::from(&mut yi).and(&xi).for_each(|o, &v| {
                *o = ga * (v - mu) * is + be;
            });
        }
    }
    y.into_dyn()
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn batchnorm_backward<T: Scalar>(
    x: &ArrayD<T>,
    gamma: &ArrayD<T>,
    g: &ArrayD<T>,
    mean: &[T],
    invstd: &[T],
    dx_slot: Option<usize>,
    dgamma_slot: Option<usize>,
    dbeta_slot: Option<usize>,
    grads: &mut [Option<ArrayD<T>>],
) {
    let xv = x.view().into_dimensionality::<Ix4>().unwrap();
    let gv = g.view().into_dimensionality::<Ix4>().unwrap();
    let (n, c, h, w) = (xv.shape()[0], xv.shape()[1], xv.shape()[2], xv.shape()[3]);
    let m = T::from_usize(n * h * w).unwrap();
    let gs = gamma.as_slice().unwrap();

    // per-channel sums of dy and dy * xhat
    let mut sum_dy = vec![T::zero(); c];
    let mut sum_dy_xhat = vec![T::zero(); c];
    for ni in 0..n {
        for ci in 0..c {
            let (mu, is) = (mean[ci], invstd[ci]);
            let xi = xv.index_axis(ndarray::Axis(0), ni);
            let xi = xi.index_axis(ndarray::Axis(0), ci);
            let gi = gv.index_axis(ndarray::Axis(0), ni);
            let gi = gi.index_axis(ndarray::Axis(0), ci);
            ndarray::Zip::from(&gi).and(&xi).for_each(|&dy, &xx| {
                sum_dy[ci] = sum_dy[ci] + dy;
                sum_dy_xhat[ci] = sum_dy_xhat[ci] + dy * (xx - mu) * is;
            });
        }
    }

    if let Some(slot) = dx_slot {
        let mut dx = ndarray::Array4::<T>::zeros((n, c, h, w));
        for ni in 0..n {
            for ci in 0..c {
                let (mu, is, ga) = (mean[ci], invstd[ci], gs[ci]);
                let k = ga * is / m;
                let (sdy, sdyx) = (sum_dy[ci], sum_dy_xhat[ci]);
                let xi = xv.index_axis(ndarray::Axis(0), ni);
                let xi = xi.index_axis(ndarray::Axis(0), ci);
                let gi = gv.index_axis(ndarray::Axis(0), ni);
                let gi = gi.index_axis(ndarray::Axis(0), ci);
                let mut di = dx.index_axis_mut(ndarray::Axis(0), ni);
                let mut di = di.index_axis_mut(ndarray::Axis(0), ci);
                ndarray::Zip::from(&mut di).and(&gi).and(&xi).for_each(|o, &dy, &xx| {
                    let xhat = (xx - mu) * is;
                    *o = k * (m * dy - sdy - xhat * sdyx);
                });
            }
        }
        super::add_into(&mut grads[slot], dx.into_dyn());
    }
    if let Some(slot) = dgamma_slot {
        super::add_into(
            &mut grads[slot],
            ndarray::Array1::from_vec(sum_dy_xhat.clone()).into_dyn(),
        );
    }
    if let Some(slot) = dbeta_slot {
        super::add_into(
            &mut grads[slot],
            ndarray::Array1::from_vec(sum_dy.clone()).into_dyn(),
        );
    }
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn batchnorm_eval_backward<T: Scalar>(
    x: &ArrayD<T>,
    gamma: &ArrayD<T>,
    g: &ArrayD<T>,
    mean: &[T],
    invstd: &[T],
    dx_slot: Option<usize>,
    dgamma_slot: Option<usize>,
    dbeta_slot: Option<usize>,
    grads: &mut [Option<ArrayD<T>>],
) {
    let xv = x.view().into_dimensionality::<Ix4>().unwrap();
    let gv = g.view().into_dimensionality::<Ix4>().unwrap();
    let (n, c) = (xv.shape()[0], xv.shape()[1]);
    let gs = gamma.as_slice().unwrap();
    if let Some(slot) = dx_slot {
        let mut dx = ndarray::Array4::<T>::zeros(gv.raw_dim());
        for ni in 0..n {
            for ci in 0..c {
                let k = gs[ci] * invstd[ci];
                let gi = gv.index_axis(ndarray::Axis(0), ni);
                let gi = gi.index_axis(ndarray::Axis(0), ci);
                let mut di = dx.index_axis_mut(ndarray::Axis(0), ni);
                let mut di = di.index_axis_mut(ndarray::Axis(0), ci);
                ndarray::Zip::from(&mut di).and(&gi).for_each(|o, &dy| *o = dy * k);
            }
        }
        super::add_into(&mut grads[slot], dx.into_dyn());
    }
    if dgamma_slot.is_some() || dbeta_slot.is_some() {
        let mut sum_dy = vec![T::zero(); c];
        let mut sum_dy_xhat = vec![T::zero(); c];
        for ni in 0..n {
            for ci in 0..c {
                let (mu, is) = (mean[ci], invstd[ci]);
                let xi = xv.index_axis(ndarray::Axis(0), ni);
                let xi = xi.index_axis(ndarray::Axis(0), ci);
                let gi = gv.index_axis(ndarray::Axis(0), ni);
                let gi = gi.index_axis(ndarray::Axis(0), ci);
                ndarray::Zip::from(&gi).and(&xi).for_each(|&dy, &xx| {
                    sum_dy[ci] = sum_dy[ci] + dy;
                    sum_dy_xhat[ci] = sum_dy_xhat[ci] + dy * (xx - mu) * is;
                });
            }
        }
        if let Some(slot) = dgamma_slot {
            super::add_into(
                &mut grads[slot],
                ndarray::Array1::from_vec(sum_dy_xhat).into_dyn(),
            );
        }
        if let Some(slot) = dbeta_slot {
            super::add_into(&mut grads[slot], ndarray::Array1::from_vec(sum_dy).into_dyn());
        }
    }
}

// ---- layer norm ----

pub(crate) fn layernorm_forward<T: Scalar>(
    x: &ArrayD<T>,
    gamma: &ArrayD<T>,
    beta: &ArrayD<T>,
    eps: T,
) -> (ArrayD<T>, Vec<T>, Vec<T>) {
    let xv = x.view().into_dimensionality::<Ix2>().unwrap();
    let (rows, d) = (xv.shape()[0], xv.shape()[1]);
    let dn = T::from_usize(d).unwrap();
    let gs = gamma.as_slice().unwrap();
    let bs = beta.as_slice().unwrap();
    let mut y = ndarray::Array2::<T>::zeros((rows, d));
    let mut means = vec![T::zero(); rows];
    let mut invstds = vec![T::zero(); rows];
    for r in 0..rows {
        let row = xv.row(r);
        let mu = row.sum() / dn;
        let mut s2 = T::zero();
        for &v in row {
            let dv = v - mu;
            s2 = s2 + dv * dv;
        }
        let is = T::one() / (s2 / dn + eps).sqrt();
        means[r] = mu;
        invstds[r] = is;
        let mut out = y.row_mut(r);
        for (j, o) in out.iter_mut().enumerate() {
            *o = gs[j] * (row[j] - mu) * is + bs[j];
        }
    }
    (y.into_dyn(), means, invstds)
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn layernorm_backward<T: Scalar>(
    x: &ArrayD<T>,
    gamma: &ArrayD<T>,
    g: &ArrayD<T>,
    mean: &[T],
    invstd: &[T],
    dx_slot: Option<usize>,
    dgamma_slot: Option<usize>,
    dbeta_slot: Option<usize>,
    grads: &mut [Option<ArrayD<T>>],
) {
    let xv = x.view().into_dimensionality::<Ix2>().unwrap();
    let gv = g.view().into_dimensionality::<Ix2>().unwrap();
    let (rows, d) = (xv.shape()[0], xv.shape()[1]);
    let dn = T::from_usize(d).unwrap();
    let gs = gamma.as_slice().unwrap();

    let mut dgamma = vec![T::zero(); d];
    let mut dbeta = vec![T::zero(); d];
    let mut dx = ndarray::Array2::<T>::zeros((rows, d));
    for r in 0..rows {
        let (mu, is) = (mean[r], invstd[r]);
        let xr = xv.row(r);
        let gr = gv.row(r);
        let mut s_dxhat = T::zero();
        let mut s_dxhat_xhat = T::zero();
        for j in 0..d {
            let xhat = (xr[j] - mu) * is;
            let dxhat = gr[j] * gs[j];
            s_dxhat = s_dxhat + dxhat;
            s_dxhat_xhat = s_dxhat_xhat + dxhat * xhat;
            dgamma[j] = dgamma[j] + gr[j] * xhat;
            dbeta[j] = dbeta[j] + gr[j];
        }
        if dx_slot.is_some() {
            let mut dxr = dx.row_mut(r);
            for j in 0..d {
                let xhat = (xr[j] - mu) * is;
                let dxhat = gr[j] * gs[j];
                dxr[j] = is / dn * (dn * dxhat - s_dxhat - xhat * s_dxhat_xhat);
            }
        }
    }
    if let Some(slot) = dx_slot {
        super::add_into(&mut grads[slot], dx.into_dyn());
    }
    if let Some(slot) = dgamma_slot {
        super::add_into(&mut grads[slot], ndarray::Array1::from_vec(dgamma).into_dyn());
    }
    if let Some(slot) = dbeta_slot {
        super::add_into(&mut grads[slot], ndarray::Array1::from_vec(dbeta).into_dyn());
    }
}

// ---- softmax family ----

pub(crate) fn softmax_last<T: Scalar>(x: &ArrayD<T>) -> ArrayD<T> {
    let b = *x.shape().last().expect("softmax: scalar input");
    let rows = x.len() / b;
    let xs = x.as_slice().unwrap();
    let mut out = ArrayD::<T>::zeros(x.raw_dim());
    let os = out.as_slice_mut().unwrap();
    for r in 0..rows {
        let row = &xs[r * b..(r + 1) * b];
        let mut mx = row[0];
        for &v in row {
            if v > mx {
                mx = v;
            }
        }
        let mut sum = T::zero();
        for (j, &v) in row.iter().enumerate() {
            let e = (v - mx).exp();
            os[r * b + j] = e;
            sum = sum + e;
        }
        for j in 0..b {
            os[r * b + j] = os[r * b + j] / sum;
        }
    }
    out
}

pub(crate) fn softmax_last_backward<T: Scalar>(y: &ArrayD<T>, g: &ArrayD<T>) -> ArrayD<T> {
    let b = *y.shape().last().unwrap();
    let rows = y.len() / b;
    let ys = y.as_slice().unwrap();
    let gs = g.as_slice().unwrap();
    let mut out = ArrayD::<T>::zeros(y.raw_dim());
    let os = out.as_slice_mut().unwrap();
    for r in 0..rows {
        let mut dot = T::zero();
        for j in 0..b {
            dot = dot + ys[r * b + j] * gs[r * b + j];
        }
        for j in 0..b {
            os[r * b + j] = ys[r * b + j] * (gs[r * b + j] - dot);
        }
    }
    out
}

pub(crate) fn softmax_expect_value<T: Scalar>(softmax: &ArrayD<T>) -> ArrayD<T> {
    let b = *softmax.shape().last().unwrap();
    let rows = softmax.len() / b;
    let ss = softmax.as_slice().unwrap();
    let out_shape: Vec<usize> = softmax.shape()[..softmax.ndim() - 1].to_vec();
    let mut out = ArrayD::<T>::zeros(IxDyn(&out_shape));
    let os = out.as_slice_mut().unwrap();
    for r in 0..rows {
        let mut e = T::zero();
        for j in 0..b {
            e = e + ss[r * b + j] * T::from_usize(j).unwrap();
        }
        os[r] = e;
    }
    out
}

pub(crate) fn softmax_expect_backward<T: Scalar>(
    softmax: &ArrayD<T>,
    expect: &ArrayD<T>,
    g: &ArrayD<T>,
) -> ArrayD<T> {
    let b = *softmax.shape().last().unwrap();
    let rows = softmax.len() / b;
    let ss = softmax.as_slice().unwrap();
    let es = expect.as_slice().unwrap();
    let gs = g.as_slice().unwrap();
    let mut out = ArrayD::<T>::zeros(softmax.raw_dim());
    let os = out.as_slice_mut().unwrap();
    for r in 0..rows {
        for j in 0..b {
            os[r * b + j] = gs[r] * ss[r * b + j] * (T::from_usize(j).unwrap() - es[r]);
        }
    }
    out
}

pub(crate) fn dfl_value<T: Scalar>(softmax: &ArrayD<T>, targets: &[T], norm: T) -> ArrayD<T> {
    let b = *softmax.shape().last().unwrap();
    let ss = softmax.as_slice().unwrap();
    let tiny = T::from_f64(1e-30);
    let mut total = T::zero();
    for (r, &y) in targets.iter().enumerate() {
        let l = y.floor();
        let hcell = y.ceil();
        let li = l.to_f64_() as usize;
        let hi = hcell.to_f64_() as usize;
        if li == hi {
            total = total - (ss[r * b + li].max(tiny)).ln();
        } else {
            let wl = hcell - y;
            let wh = y - l;
            total = total
                - (wl * (ss[r * b + li].max(tiny)).ln() + wh * (ss[r * b + hi].max(tiny)).ln());
        }
    }
    ArrayD::from_elem(IxDyn(&[]), total / norm)
}

pub(crate) fn dfl_backward<T: Scalar>(softmax: &ArrayD<T>, targets: &[T], scale: T) -> ArrayD<T> {
    // d/dz of -sum(t_j ln softmax_j) is softmax - t
    let b = *softmax.shape().last().unwrap();
    let ss = softmax.as_slice().unwrap();
    let mut out = ArrayD::<T>::zeros(softmax.raw_dim());
    let os = out.as_slice_mut().unwrap();
    for (r, &y) in targets.iter().enumerate() {
        let l = y.floor();
        let hcell = y.ceil();
        let li = l.to_f64_() as usize;
        let hi = hcell.to_f64_() as usize;
        for j in 0..b {
            os[r * b + j] = ss[r * b + j] * scale;
        }
        if li == hi {
            os[r * b + li] = os[r * b + li] - scale;
        } else {
            os[r * b + li] = os[r * b + li] - (hcell - y) * scale;
            os[r * b + hi] = os[r * b + hi] - (y - l) * scale;
        }
    }
    out
}

// ---- bilinear resize ----

fn resize_axis_weights(i_len: usize, o_len: usize) -> Vec<(usize, usize, f64)> {
    let scale = i_len as f64 / o_len as f64;
    (0..o_len)
        .map(|o| {
            let s = (o as f64 + 0.5) * scale - 0.5;
            if s <= 0.0 {
                (0, 0, 0.0)
            } else if s >= (i_len - 1) as f64 {
                (i_len - 1, i_len - 1, 0.0)
            } else {
                let f = s.floor();
                let lo = f as usize;
                (lo, lo + 1, s - f)
            }
        })
        .collect()
}

/// Bilinear resize of an `[N,C,H,W]` tensor with half-pixel centers,
/// edge-clamped. Identity when target size equals input size.
pub fn bilinear_resize<T: Scalar>(x: &ArrayD<T>, oh: usize, ow: usize) -> ArrayD<T> {
    let xv = x.view().into_dimensionality::<Ix4>().unwrap();
    let (n, c, h, w) = (xv.shape()[0], xv.shape()[1], xv.shape()[2], xv.shape()[3]);
    let yw = resize_axis_weights(h, oh);
    let xw = resize_axis_weights(w, ow);
    let mut out = ndarray::Array4::<T>::zeros((n, c, oh, ow));
    let xs = x.as_slice().unwrap();
    let os = out.as_slice_mut().unwrap();
    for ni in 0..n {
        for ci in 0..c {
            let src = (ni * c + ci) * h * w;
            let dst = (ni * c + ci) * oh * ow;
            for (oy, &(y0, y1, fy)) in yw.iter().enumerate() {
                let fy = T::from_f64(fy);
                let r0 = src + y0 * w;
                let r1 = src + y1 * w;
                let drow = dst + oy * ow;
                for (ox, &(x0, x1, fx)) in xw.iter().enumerate() {
                    let fx = T::from_f64(fx);
                    let one = T::one();
                    let top = xs[r0 + x0] * (one - fx) + xs[r0 + x1] * fx;
                    let bot = xs[r1 + x0] * (one - fx) + xs[r1 + x1] * fx;
                    os[drow + ox] = top * (one - fy) + bot * fy;
                }
            }
        }
    }
    out.into_dyn()
}

pub(crate) fn bilinear_resize_backward<T: Scalar>(g: &ArrayD<T>, ih: usize, iw: usize) -> ArrayD<T> {
    let gv = g.view().into_dimensionality::<Ix4>().unwrap();
    let (n, c, oh, ow) = (gv.shape()[0], gv.shape()[1], gv.shape()[2], gv.shape()[3]);
    let yw = resize_axis_weights(ih, oh);
    let xw = resize_axis_weights(iw, ow);
    let mut out = ndarray::Array4::<T>::zeros((n, c, ih, iw));
    let gs = g.as_slice().unwrap();
    let os = out.as_slice_mut().unwrap();
    for ni in 0..n {
        for ci in 0..c {
            let src = (ni * c + ci) * oh * ow;
            let dst = (ni * c + ci) * ih * iw;
            for (oy, &(y0, y1, fy)) in yw.iter().enumerate() {
                let fy = T::from_f64(fy);
                let one = T::one();
                for (ox, &(x0, x1, fx)) in xw.iter().enumerate() {
                    let fx = T::from_f64(fx);
                    let gg = gs[src + oy * ow + ox];
                    os[dst + y0 * iw + x0] = os[dst + y0 * iw + x0] + gg * (one - fy) * (one - fx);
                    os[dst + y0 * iw + x1] = os[dst + y0 * iw + x1] + gg * (one - fy) * fx;
                    os[dst + y1 * iw + x0] = os[dst + y1 * iw + x0] + gg * fy * (one - fx);
                    os[dst + y1 * iw + x1] = os[dst + y1 * iw + x1] + gg * fy * fx;
                }
            }
        }
    }
    out.into_dyn()
}

/// Exact area-average downsample by an integer factor (targets for the
/// affordance loss at working resolution). Input `[A,H,W]`.
pub fn area_downsample<T: Scalar>(x: &ndarray::Array3<T>, factor: usize) -> ndarray::Array3<T> {
    let (a, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    assert!(h % factor == 0 && w % factor == 0, "area_downsample: non-divisible size");
    let (oh, ow) = (h / factor, w / factor);
    let inv = T::from_usize(factor * factor).unwrap().recip();
    let mut out = ndarray::Array3::<T>::zeros((a, oh, ow));
    for ai in 0..a {
        for oy in 0..oh {
            for ox in 0..ow {
                let mut s = T::zero();
                for dy in 0..factor {
                    for dx in 0..factor {
                        s = s + x[[ai, oy * factor + dy, ox * factor + dx]];
                    }
                }
                out[[ai, oy, ox]] = s * inv;
            }
        }
    }
    out
}

// ---- gate compose ----

fn patch_sample_weights(coord: f64, lo: f64, extent: f64, grid: usize) -> (usize, usize, f64) {
    // map a pixel center into patch coordinates, edge-clamped
    let u = ((coord - lo) / extent) * grid as f64 - 0.5;
    if u <= 0.0 {
        (0, 0, 0.0)
    } else if u >= (grid - 1) as f64 {
        (grid - 1, grid - 1, 0.0)
    } else {
        let f = u.floor();
        (f as usize, f as usize + 1, u - f)
    }
}

type GateForward<T> = (ArrayD<T>, Vec<i32>, Vec<bool>);

pub(crate) fn gate_compose_forward<T: Scalar>(
    patches: &[&ArrayD<T>],
    regions: &[PatchRegion],
    categories: usize,
    height: usize,
    width: usize,
    base: T,
    eps: T,
) -> GateForward<T> {
    let mut out = ArrayD::<T>::from_elem(IxDyn(&[categories, height, width]), base);
    let mut winner = vec![-1i32; categories * height * width];
    let os = out.as_slice_mut().unwrap();
    for (e, (patch, region)) in patches.iter().zip(regions).enumerate() {
        let g = patch.shape()[1];
        debug_assert_eq!(patch.shape(), &[categories, g, g]);
        let ps = patch.as_slice().unwrap();
        let (bw, bh) = (region.x2 - region.x1, region.y2 - region.y1);
        if bw <= 0.0 || bh <= 0.0 {
            continue;
        }
        let y_lo = (region.y1 - 0.5).ceil().max(0.0) as usize;
        let y_hi = ((region.y2 - 0.5).floor() as isize).min(height as isize - 1);
        let x_lo = (region.x1 - 0.5).ceil().max(0.0) as usize;
        let x_hi = ((region.x2 - 0.5).floor() as isize).min(width as isize - 1);
        if y_hi < y_lo as isize || x_hi < x_lo as isize {
            continue;
        }
        for y in y_lo..=(y_hi as usize) {
            let (v0, v1, fv) = patch_sample_weights(y as f64 + 0.5, region.y1, bh, g);
            let fv = T::from_f64(fv);
            for x in x_lo..=(x_hi as usize) {
                let (u0, u1, fu) = patch_sample_weights(x as f64 + 0.5, region.x1, bw, g);
                let fu = T::from_f64(fu);
                let one = T::one();
                for a in 0..categories {
                    let p_off = a * g * g;
                    let top = ps[p_off + v0 * g + u0] * (one - fu) + ps[p_off + v0 * g + u1] * fu;
                    let bot = ps[p_off + v1 * g + u0] * (one - fu) + ps[p_off + v1 * g + u1] * fu;
                    let val = top * (one - fv) + bot * fv;
                    let idx = (a * height + y) * width + x;
                    if val > os[idx] {
                        os[idx] = val;
                        winner[idx] = e as i32;
                    }
                }
            }
        }
    }
    let one = T::one();
    let mut clamped = vec![false; os.len()];
    for (i, v) in os.iter_mut().enumerate() {
        if *v < eps {
            *v = eps;
            clamped[i] = true;
        } else if *v > one - eps {
            *v = one - eps;
            clamped[i] = true;
        }
    }
    (out, winner, clamped)
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn gate_compose_backward<T: Scalar>(
    g: &ArrayD<T>,
    patches: &[super::Var],
    regions: &[PatchRegion],
    winner: &[i32],
    clamped: &[bool],
    values: &[ArrayD<T>],
    requires: &[bool],
    grads: &mut [Option<ArrayD<T>>],
) {
    let shape = g.shape();
    let (categories, height, width) = (shape[0], shape[1], shape[2]);
    let gs = g.as_slice().unwrap();
    for (e, (patch_var, region)) in patches.iter().zip(regions).enumerate() {
        if !requires[patch_var.0] {
            continue;
        }
        let pshape = values[patch_var.0].shape();
        let grid = pshape[1];
        let mut dpatch = ArrayD::<T>::zeros(values[patch_var.0].raw_dim());
        let ds = dpatch.as_slice_mut().unwrap();
        let (bw, bh) = (region.x2 - region.x1, region.y2 - region.y1);
        if bw <= 0.0 || bh <= 0.0 {
            continue;
        }
        let y_lo = (region.y1 - 0.5).ceil().max(0.0) as usize;
        let y_hi = ((region.y2 - 0.5).floor() as isize).min(height as isize - 1);
        let x_lo = (region.x1 - 0.5).ceil().max(0.0) as usize;
        let x_hi = ((region.x2 - 0.5).floor() as isize).min(width as isize - 1);
        if y_hi < y_lo as isize || x_hi < x_lo as isize {
            continue;
        }
        for y in y_lo..=(y_hi as usize) {
            let (v0, v1, fv) = patch_sample_weights(y as f64 + 0.5, region.y1, bh, grid);
            let fv = T::from_f64(fv);
            for x in x_lo..=(x_hi as usize) {
                let (u0, u1, fu) = patch_sample_weights(x as f64 + 0.5, region.x1, bw, grid);
                let fu = T::from_f64(fu);
                let one = T::one();
                for a in 0..categories {
                    let idx = (a * height + y) * width + x;
                    if winner[idx] != e as i32 || clamped[idx] {
                        continue;
                    }
                    let gg = gs[idx];
                    let p_off = a * grid * grid;
                    ds[p_off + v0 * grid + u0] =
                        ds[p_off + v0 * grid + u0] + gg * (one - fv) * (one - fu);
                    ds[p_off + v0 * grid + u1] = ds[p_off + v0 * grid + u1] + gg * (one - fv) * fu;
                    ds[p_off + v1 * grid + u0] = ds[p_off + v1 * grid + u0] + gg * fv * (one - fu);
                    ds[p_off + v1 * grid + u1] = ds[p_off + v1 * grid + u1] + gg * fv * fu;
                }
            }
        }
        super::add_into(&mut grads[patch_var.0], dpatch);
    }
}
