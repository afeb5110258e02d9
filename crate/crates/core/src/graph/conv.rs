//! Convolution and transposed convolution, forward and backward.
//!
//! Both directions are im2col/col2im plus a matmul; the batch axis is the
//! parallel axis, and per-sample partial weight gradients are reduced
//! sequentially in batch order so results are bit-deterministic.

use super::kernels::{col2im, im2col, matmul, transpose};
use super::{Graph, Op, Var};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use rayon::prelude::*;

struct ConvDims {
    n: usize,
    ci: usize,
    h: usize,
    w: usize,
    co: usize,
    k: usize,
    oh: usize,
    ow: usize,
}

fn check_conv<T: Scalar>(
    g: &Graph<T>,
    input: Var,
    weight: Var,
    bias: Var,
    stride: usize,
    padding: usize,
    transposed: bool,
) -> Result<ConvDims> {
    let op: &'static str = if transposed { "conv2d_transpose" } else { "conv2d" };
    if stride < 1 {
        return Err(Error::InvalidArg(format!("{op}: stride must be >= 1, got {stride}")));
    }
    let (n, ci, h, w) = g.value(input).dims4().map_err(|_| Error::ShapeMismatch {
        op,
        detail: format!("input must be rank-4 NCHW, got {:?}", g.value(input).shape()),
    })?;
    let ws = g.value(weight).shape();
    if ws.len() != 4 || ws[2] != ws[3] {
        return Err(Error::ShapeMismatch {
            op,
            detail: format!("weight must be rank-4 with square kernel, got {ws:?}"),
        });
    }
    let k = ws[2];
    // conv weight is [out, in, k, k]; transposed conv weight is [in, out, k, k]
    let (w_in, co) = if transposed { (ws[0], ws[1]) } else { (ws[1], ws[0]) };
    if w_in != ci {
        return Err(Error::ShapeMismatch {
            op,
            detail: format!("input channels ({ci}) != weight input channels ({w_in})"),
        });
    }
    let bs = g.value(bias).shape();
    if bs != [co] {
        return Err(Error::ShapeMismatch {
            op,
            detail: format!("bias must be [{co}], got {bs:?}"),
        });
    }
    let (oh, ow) = if transposed {
        let kh = k as isize - 2 * padding as isize;
        let oh = (h as isize - 1) * stride as isize + kh;
        let ow = (w as isize - 1) * stride as isize + kh;
        if oh < 1 || ow < 1 {
            return Err(Error::ShapeMismatch {
                op,
                detail: format!("output size {oh}x{ow} not positive (input {h}x{w}, k={k}, stride={stride}, padding={padding})"),
            });
        }
        (oh as usize, ow as usize)
    } else {
        if h + 2 * padding < k || w + 2 * padding < k {
            return Err(Error::ShapeMismatch {
                op,
                detail: format!("kernel {k} larger than padded input {}x{}", h + 2 * padding, w + 2 * padding),
            });
        }
        ((h + 2 * padding - k) / stride + 1, (w + 2 * padding - k) / stride + 1)
    };
    Ok(ConvDims { n, ci, h, w, co, k, oh, ow })
}

pub(super) fn forward<T: Scalar>(
    g: &mut Graph<T>,
    input: Var,
    weight: Var,
    bias: Var,
    stride: usize,
    padding: usize,
) -> Result<Var> {
    let d = check_conv(g, input, weight, bias, stride, padding, false)?;
    let x = g.value(input).data();
    let wt = g.value(weight).data();
    let b = g.value(bias).data();
    let ikk = d.ci * d.k * d.k;
    let in_plane = d.ci * d.h * d.w;
    let out_plane = d.co * d.oh * d.ow;
    let spatial = d.oh * d.ow;

    let mut out = vec![T::zero(); d.n * out_plane];
    out.par_chunks_mut(out_plane).enumerate().for_each(|(ni, o)| {
        let mut cols = vec![T::zero(); ikk * spatial];
        im2col(
            &x[ni * in_plane..(ni + 1) * in_plane],
            d.ci,
            d.h,
            d.w,
            d.k,
            stride,
            padding,
            d.oh,
            d.ow,
            &mut cols,
        );
        matmul(wt, d.co, ikk, &cols, spatial, o);
        for c in 0..d.co {
            let bv = b[c];
            for v in &mut o[c * spatial..(c + 1) * spatial] {
                *v += bv;
            }
        }
    });

    let value = Tensor::from_vec(vec![d.n, d.co, d.oh, d.ow], out)?;
    Ok(g.push_op(
        value,
        &[input, weight, bias],
        Op::Conv2d { input, weight, bias, stride, padding },
    ))
}

pub(super) fn forward_transpose<T: Scalar>(
    g: &mut Graph<T>,
    input: Var,
    weight: Var,
    bias: Var,
    stride: usize,
    padding: usize,
) -> Result<Var> {
    let d = check_conv(g, input, weight, bias, stride, padding, true)?;
    let x = g.value(input).data();
    let wt = g.value(weight).data();
    let b = g.value(bias).data();
    let okk = d.co * d.k * d.k;
    let in_plane = d.ci * d.h * d.w;
    let out_plane = d.co * d.oh * d.ow;
    let in_spatial = d.h * d.w;

    // weight [ci, co*k*k] transposed once, shared across the batch
    let wt_t = transpose(wt, d.ci, okk);

    let mut out = vec![T::zero(); d.n * out_plane];
    out.par_chunks_mut(out_plane).enumerate().for_each(|(ni, o)| {
        let mut cols = vec![T::zero(); okk * in_spatial];
        matmul(&wt_t, okk, d.ci, &x[ni * in_plane..(ni + 1) * in_plane], in_spatial, &mut cols);
        col2im(&cols, d.co, d.oh, d.ow, d.k, stride, padding, d.h, d.w, o);
        for c in 0..d.co {
            let bv = b[c];
            for v in &mut o[c * d.oh * d.ow..(c + 1) * d.oh * d.ow] {
                *v += bv;
            }
        }
    });

    let value = Tensor::from_vec(vec![d.n, d.co, d.oh, d.ow], out)?;
    Ok(g.push_op(
        value,
        &[input, weight, bias],
        Op::ConvTranspose2d { input, weight, bias, stride, padding },
    ))
}

#[allow(clippy::too_many_arguments)]
pub(super) fn backward<T: Scalar>(
    g: &Graph<T>,
    gout: &Tensor<T>,
    input: Var,
    weight: Var,
    bias: Var,
    stride: usize,
    padding: usize,
    out: &mut Vec<(Var, Tensor<T>)>,
) -> Result<()> {
    let d = check_conv(g, input, weight, bias, stride, padding, false)?;
    let x = g.value(input).data();
    let wt = g.value(weight).data();
    let go = gout.data();
    let ikk = d.ci * d.k * d.k;
    let in_plane = d.ci * d.h * d.w;
    let out_plane = d.co * d.oh * d.ow;
    let spatial = d.oh * d.ow;

    if g.requires_grad(bias) {
        let mut db = vec![T::zero(); d.co];
        for ni in 0..d.n {
            for c in 0..d.co {
                let mut s = T::zero();
                for &v in &go[ni * out_plane + c * spatial..ni * out_plane + (c + 1) * spatial] {
                    s += v;
                }
                db[c] += s;
            }
        }
        out.push((bias, Tensor::from_vec(vec![d.co], db)?));
    }

    if g.requires_grad(input) {
        let wt_t = transpose(wt, d.co, ikk); // [ikk, co]
        let mut dx = vec![T::zero(); d.n * in_plane];
        dx.par_chunks_mut(in_plane).enumerate().for_each(|(ni, dxs)| {
            let mut cols = vec![T::zero(); ikk * spatial];
            matmul(&wt_t, ikk, d.co, &go[ni * out_plane..(ni + 1) * out_plane], spatial, &mut cols);
            col2im(&cols, d.ci, d.h, d.w, d.k, stride, padding, d.oh, d.ow, dxs);
        });
        out.push((input, Tensor::from_vec(vec![d.n, d.ci, d.h, d.w], dx)?));
    }

    if g.requires_grad(weight) {
        let partials: Vec<Vec<T>> = (0..d.n)
            .into_par_iter()
            .map(|ni| {
                let mut cols = vec![T::zero(); ikk * spatial];
                im2col(
                    &x[ni * in_plane..(ni + 1) * in_plane],
                    d.ci,
                    d.h,
                    d.w,
                    d.k,
                    stride,
                    padding,
                    d.oh,
                    d.ow,
                    &mut cols,
                );
                let cols_t = transpose(&cols, ikk, spatial); // [spatial, ikk]
                let mut dw = vec![T::zero(); d.co * ikk];
                matmul(&go[ni * out_plane..(ni + 1) * out_plane], d.co, spatial, &cols_t, ikk, &mut dw);
                dw
            })
            .collect();
        let mut dw_total = vec![T::zero(); d.co * ikk];
        for p in &partials {
            for (acc, &v) in dw_total.iter_mut().zip(p) {
                *acc += v;
            }
        }
        out.push((weight, Tensor::from_vec(vec![d.co, d.ci, d.k, d.k], dw_total)?));
    }
    Ok(())
}

#[allow(clippy::too_many_arguments)]
pub(super) fn backward_transpose<T: Scalar>(
    g: &Graph<T>,
    gout: &Tensor<T>,
    input: Var,
    weight: Var,
    bias: Var,
    stride: usize,
    padding: usize,
    out: &mut Vec<(Var, Tensor<T>)>,
) -> Result<()> {
    let d = check_conv(g, input, weight, bias, stride, padding, true)?;
    let x = g.value(input).data();
    let wt = g.value(weight).data();
    let go = gout.data();
    let okk = d.co * d.k * d.k;
    let in_plane = d.ci * d.h * d.w;
    let out_plane = d.co * d.oh * d.ow;
    let in_spatial = d.h * d.w;

    if g.requires_grad(bias) {
        let mut db = vec![T::zero(); d.co];
        let out_spatial = d.oh * d.ow;
        for ni in 0..d.n {
            for c in 0..d.co {
                let mut s = T::zero();
                for &v in &go[ni * out_plane + c * out_spatial..ni * out_plane + (c + 1) * out_spatial] {
                    s += v;
                }
                db[c] += s;
            }
        }
        out.push((bias, Tensor::from_vec(vec![d.co], db)?));
    }

    if g.requires_grad(input) {
        // d input = plain convolution of the upstream gradient with the same
        // kernel (adjoint of the forward scatter).
        let mut dx = vec![T::zero(); d.n * in_plane];
        dx.par_chunks_mut(in_plane).enumerate().for_each(|(ni, dxs)| {
            let mut cols = vec![T::zero(); okk * in_spatial];
            im2col(
                &go[ni * out_plane..(ni + 1) * out_plane],
                d.co,
                d.oh,
                d.ow,
                d.k,
                stride,
                padding,
                d.h,
                d.w,
                &mut cols,
            );
            matmul(wt, d.ci, okk, &cols, in_spatial, dxs);
        });
        out.push((input, Tensor::from_vec(vec![d.n, d.ci, d.h, d.w], dx)?));
    }

    if g.requires_grad(weight) {
        let partials: Vec<Vec<T>> = (0..d.n)
            .into_par_iter()
            .map(|ni| {
                let mut cols = vec![T::zero(); okk * in_spatial];
                im2col(
                    &go[ni * out_plane..(ni + 1) * out_plane],
                    d.co,
                    d.oh,
                    d.ow,
                    d.k,
                    stride,
                    padding,
                    d.h,
                    d.w,
                    &mut cols,
                );
                let cols_t = transpose(&cols, okk, in_spatial); // [hw, okk]
                let mut dw = vec![T::zero(); d.ci * okk];
                matmul(&x[ni * in_plane..(ni + 1) * in_plane], d.ci, in_spatial, &cols_t, okk, &mut dw);
                dw
            })
            .collect();
        let mut dw_total = vec![T::zero(); d.ci * okk];
        for p in &partials {
            for (acc, &v) in dw_total.iter_mut().zip(p) {
                *acc += v;
            }
        }
        out.push((weight, Tensor::from_vec(vec![d.ci, d.co, d.k, d.k], dw_total)?));
    }
    Ok(())
}
