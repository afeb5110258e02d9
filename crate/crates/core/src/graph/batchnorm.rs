//! Batch normalization forward/backward (epsilon 1e-5, momentum 0.1 at the
//! layer level; this module takes both as arguments).

use super::{Graph, Op, Var};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[allow(clippy::too_many_arguments)]
pub(super) fn forward<T: Scalar>(
    g: &mut Graph<T>,
    input: Var,
    gamma: Var,
    beta: Var,
    running_mean: &mut Tensor<T>,
    running_var: &mut Tensor<T>,
    train: bool,
    momentum: T,
    eps: T,
) -> Result<Var> {
    let (n, c, h, w) = g.value(input).dims4().map_err(|_| Error::ShapeMismatch {
        op: "batchnorm2d",
        detail: format!("input must be rank-4 NCHW, got {:?}", g.value(input).shape()),
    })?;
    for (name, v) in [("gamma", gamma), ("beta", beta)] {
        if g.value(v).shape() != [c] {
            return Err(Error::ShapeMismatch {
                op: "batchnorm2d",
                detail: format!("{name} must be [{c}], got {:?}", g.value(v).shape()),
            });
        }
    }
    if running_mean.shape() != [c] || running_var.shape() != [c] {
        return Err(Error::ShapeMismatch {
            op: "batchnorm2d",
            detail: format!("running stats must be [{c}]"),
        });
    }

    let x = g.value(input).data();
    let plane = h * w;
    let m = n * plane;
    let m_t = T::from_f64(m as f64);

    let mut mean = vec![T::zero(); c];
    let mut inv_std = vec![T::zero(); c];
    if train {
        for ch in 0..c {
            let mut s = T::zero();
            for ni in 0..n {
                for &v in &x[(ni * c + ch) * plane..(ni * c + ch + 1) * plane] {
                    s += v;
                }
            }
            let mu = s / m_t;
            let mut var = T::zero();
            for ni in 0..n {
                for &v in &x[(ni * c + ch) * plane..(ni * c + ch + 1) * plane] {
                    let d = v - mu;
                    var += d * d;
                }
            }
            var = var / m_t;
            mean[ch] = mu;
            inv_std[ch] = T::one() / (var + eps).sqrt();
            // running update; variance folded in unbiased, as is conventional
            let var_unbiased = if m > 1 {
                var * m_t / T::from_f64((m - 1) as f64)
            } else {
                var
            };
            let keep = T::one() - momentum;
            running_mean.data_mut()[ch] = keep * running_mean.data()[ch] + momentum * mu;
            running_var.data_mut()[ch] = keep * running_var.data()[ch] + momentum * var_unbiased;
        }
    } else {
        for ch in 0..c {
            mean[ch] = running_mean.data()[ch];
            inv_std[ch] = T::one() / (running_var.data()[ch] + eps).sqrt();
        }
    }

    let ga = g.value(gamma).data();
    let be = g.value(beta).data();
    let mut out = vec![T::zero(); x.len()];
    for ni in 0..n {
        for ch in 0..c {
            let (mu, istd, gm, bt) = (mean[ch], inv_std[ch], ga[ch], be[ch]);
            let base = (ni * c + ch) * plane;
            for i in 0..plane {
                out[base + i] = gm * (x[base + i] - mu) * istd + bt;
            }
        }
    }
    let value = Tensor::from_vec(vec![n, c, h, w], out)?;
    Ok(g.push_op(
        value,
        &[input, gamma, beta],
        Op::BatchNorm2d { input, gamma, beta, mean, inv_std, train },
    ))
}

#[allow(clippy::too_many_arguments)]
pub(super) fn backward<T: Scalar>(
    g: &Graph<T>,
    gout: &Tensor<T>,
    input: Var,
    gamma: Var,
    beta: Var,
    mean: &[T],
    inv_std: &[T],
    train: bool,
    out: &mut Vec<(Var, Tensor<T>)>,
) -> Result<()> {
    let (n, c, h, w) = g.value(input).dims4()?;
    let plane = h * w;
    let m_t = T::from_f64((n * plane) as f64);
    let x = g.value(input).data();
    let ga = g.value(gamma).data();
    let go = gout.data();

    let mut dgamma = vec![T::zero(); c];
    let mut dbeta = vec![T::zero(); c];
    let mut dx = vec![T::zero(); x.len()];

    for ch in 0..c {
        let (mu, istd) = (mean[ch], inv_std[ch]);
        let mut sum_g = T::zero();
        let mut sum_gx = T::zero();
        for ni in 0..n {
            let base = (ni * c + ch) * plane;
            for i in 0..plane {
                let gv = go[base + i];
                sum_g += gv;
                sum_gx += gv * (x[base + i] - mu) * istd;
            }
        }
        dbeta[ch] = sum_g;
        dgamma[ch] = sum_gx;

        if g.requires_grad(input) {
            let gm = ga[ch];
            if train {
                // dx = gamma*istd/m * (m*g - sum_g - xhat * sum(g*xhat))
                let scale = gm * istd / m_t;
                for ni in 0..n {
                    let base = (ni * c + ch) * plane;
                    for i in 0..plane {
                        let xhat = (x[base + i] - mu) * istd;
                        dx[base + i] = scale * (m_t * go[base + i] - sum_g - xhat * sum_gx);
                    }
                }
            } else {
                let scale = gm * istd;
                for ni in 0..n {
                    let base = (ni * c + ch) * plane;
                    for i in 0..plane {
                        dx[base + i] = scale * go[base + i];
                    }
                }
            }
        }
    }

    if g.requires_grad(input) {
        out.push((input, Tensor::from_vec(vec![n, c, h, w], dx)?));
    }
    if g.requires_grad(gamma) {
        out.push((gamma, Tensor::from_vec(vec![c], dgamma)?));
    }
    if g.requires_grad(beta) {
        out.push((beta, Tensor::from_vec(vec![c], dbeta)?));
    }
    Ok(())
}
