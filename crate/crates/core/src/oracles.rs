//! Independent brute-force reference implementations, used only by tests.
//!
//! Everything here is written as direct, unoptimized loops and shares no code
//! with the production kernels it validates. Keep it that way: these are the
//! ground truth the fast paths are checked against.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{nchw_index, Tensor};

/// Outcome of comparing an analytic gradient against a numeric one.
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub op: String,
    pub max_rel_err: f64,
    /// Flat coordinate of the worst-offending element.
    pub worst_coord: usize,
    pub analytic_at_worst: f64,
    pub numeric_at_worst: f64,
}

impl GradCheckReport {
    /// Relative error per element is `|a - n| / max(|a|, |n|, 1e-8)`.
    pub fn compare(op: impl Into<String>, analytic: &[f64], numeric: &[f64]) -> Self {
        assert_eq!(analytic.len(), numeric.len(), "gradient length mismatch");
        let mut worst = (0usize, 0.0f64, 0.0, 0.0);
        for (i, (&a, &n)) in analytic.iter().zip(numeric).enumerate() {
            let rel = (a - n).abs() / a.abs().max(n.abs()).max(1e-8);
            if rel > worst.1 {
                worst = (i, rel, a, n);
            }
        }
        GradCheckReport {
            op: op.into(),
            max_rel_err: worst.1,
            worst_coord: worst.0,
            analytic_at_worst: worst.2,
            numeric_at_worst: worst.3,
        }
    }
}

impl std::fmt::Display for GradCheckReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "{}: max rel err {:.3e} at flat index {} (analytic {:.6e}, numeric {:.6e})",
            self.op, self.max_rel_err, self.worst_coord, self.analytic_at_worst, self.numeric_at_worst
        )
    }
}

/// Central finite differences `(f(x+h e_i) - f(x-h e_i)) / 2h` per coordinate.
///
/// `h` defaults to 1e-4 in the callers that gradient-check at 64-bit.
pub fn finite_diff_grad(
    f: &mut dyn FnMut(&Tensor<f64>) -> Result<f64>,
    x: &Tensor<f64>,
    h: f64,
) -> Result<Tensor<f64>> {
    let mut grad = vec![0.0f64; x.numel()];
    let mut probe = x.clone();
    for i in 0..x.numel() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + h;
        let fp = f(&probe)?;
        probe.data_mut()[i] = orig - h;
        let fm = f(&probe)?;
        probe.data_mut()[i] = orig;
        if !fp.is_finite() || !fm.is_finite() {
            return Err(Error::NonFinite {
                context: format!("finite_diff_grad probe at flat index {i}"),
            });
        }
        grad[i] = (fp - fm) / (2.0 * h);
    }
    Tensor::from_vec(x.shape().to_vec(), grad)
}

/// Direct nested-loop convolution, NCHW input, OIKK weight.
pub fn reference_conv<T: Scalar>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    bias: &Tensor<T>,
    stride: usize,
    padding: usize,
) -> Tensor<T> {
    let (n, ci, h, w) = input.dims4().expect("input rank 4");
    let (co, ci_w, kh, kw) = weight.dims4().expect("weight rank 4");
    assert_eq!(ci, ci_w, "channel mismatch");
    assert_eq!(kh, kw, "square kernels only");
    let k = kh;
    let oh = (h + 2 * padding - k) / stride + 1;
    let ow = (w + 2 * padding - k) / stride + 1;
    let mut out = vec![T::zero(); n * co * oh * ow];
    let xd = input.data();
    let wd = weight.data();
    let bd = bias.data();
    for ni in 0..n {
        for o in 0..co {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = bd[o];
                    for c in 0..ci {
                        for ky in 0..k {
                            for kx in 0..k {
                                let iy = (oy * stride + ky) as isize - padding as isize;
                                let ix = (ox * stride + kx) as isize - padding as isize;
                                if iy >= 0 && iy < h as isize && ix >= 0 && ix < w as isize {
                                    let xi = nchw_index(ci, h, w, ni, c, iy as usize, ix as usize);
                                    let wi = nchw_index(ci, k, k, o, c, ky, kx);
                                    acc += xd[xi] * wd[wi];
                                }
                            }
                        }
                    }
                    out[nchw_index(co, oh, ow, ni, o, oy, ox)] = acc;
                }
            }
        }
    }
    Tensor::from_vec(vec![n, co, oh, ow], out).unwrap()
}

/// Direct scatter-loop transposed convolution, NCHW input, IOKK weight.
///
/// Output spatial extent is `(H - 1) * stride - 2 * padding + K`.
pub fn reference_conv_transpose<T: Scalar>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    bias: &Tensor<T>,
    stride: usize,
    padding: usize,
) -> Tensor<T> {
    let (n, ci, h, w) = input.dims4().expect("input rank 4");
    let (ci_w, co, kh, kw) = weight.dims4().expect("weight rank 4");
    assert_eq!(ci, ci_w, "channel mismatch");
    assert_eq!(kh, kw, "square kernels only");
    let k = kh;
    let oh = (h - 1) * stride + k - 2 * padding;
    let ow = (w - 1) * stride + k - 2 * padding;
    let mut out = vec![T::zero(); n * co * oh * ow];
    let xd = input.data();
    let wd = weight.data();
    for ni in 0..n {
        for c in 0..ci {
            for y in 0..h {
                for x in 0..w {
                    let xv = xd[nchw_index(ci, h, w, ni, c, y, x)];
                    for o in 0..co {
                        for ky in 0..k {
                            for kx in 0..k {
                                let oy = (y * stride + ky) as isize - padding as isize;
                                let ox = (x * stride + kx) as isize - padding as isize;
                                if oy >= 0 && oy < oh as isize && ox >= 0 && ox < ow as isize {
                                    let oi = nchw_index(co, oh, ow, ni, o, oy as usize, ox as usize);
                                    let wi = nchw_index(co, k, k, c, o, ky, kx);
                                    out[oi] += xv * wd[wi];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    let bd = bias.data();
    for ni in 0..n {
        for o in 0..co {
            for i in 0..oh * ow {
                out[nchw_index(co, oh, ow, ni, o, 0, 0) + i] += bd[o];
            }
        }
    }
    Tensor::from_vec(vec![n, co, oh, ow], out).unwrap()
}

/// Sliding-window SSIM over one channel, Gaussian 11x11 window, sigma 1.5,
/// K1 = 0.01, K2 = 0.03, dynamic range 1. Every window is computed from
/// scratch; no separable filtering.
pub fn reference_ssim_plane(a: &[f64], b: &[f64], h: usize, w: usize) -> f64 {
    const WIN: usize = 11;
    const SIGMA: f64 = 1.5;
    const C1: f64 = 0.01 * 0.01;
    const C2: f64 = 0.03 * 0.03;
    assert!(h >= WIN && w >= WIN, "image smaller than SSIM window");

    let mut kernel = [[0.0f64; WIN]; WIN];
    let mut ksum = 0.0;
    for (ky, row) in kernel.iter_mut().enumerate() {
        for (kx, v) in row.iter_mut().enumerate() {
            let dy = ky as f64 - (WIN as f64 - 1.0) / 2.0;
            let dx = kx as f64 - (WIN as f64 - 1.0) / 2.0;
            *v = (-(dx * dx + dy * dy) / (2.0 * SIGMA * SIGMA)).exp();
            ksum += *v;
        }
    }
    for row in kernel.iter_mut() {
        for v in row.iter_mut() {
            *v /= ksum;
        }
    }

    let mut total = 0.0;
    let mut count = 0usize;
    for y0 in 0..=(h - WIN) {
        for x0 in 0..=(w - WIN) {
            let mut mu_a = 0.0;
            let mut mu_b = 0.0;
            for ky in 0..WIN {
                for kx in 0..WIN {
                    let idx = (y0 + ky) * w + (x0 + kx);
                    mu_a += kernel[ky][kx] * a[idx];
                    mu_b += kernel[ky][kx] * b[idx];
                }
            }
            let mut var_a = 0.0;
            let mut var_b = 0.0;
            let mut cov = 0.0;
            for ky in 0..WIN {
                for kx in 0..WIN {
                    let idx = (y0 + ky) * w + (x0 + kx);
                    let da = a[idx] - mu_a;
                    let db = b[idx] - mu_b;
                    var_a += kernel[ky][kx] * da * da;
                    var_b += kernel[ky][kx] * db * db;
                    cov += kernel[ky][kx] * da * db;
                }
            }
            let num = (2.0 * mu_a * mu_b + C1) * (2.0 * cov + C2);
            let den = (mu_a * mu_a + mu_b * mu_b + C1) * (var_a + var_b + C2);
            total += num / den;
            count += 1;
        }
    }
    total / count as f64
}

/// Scripted Adam trace: replays a fixed sequence of gradients through the
/// textbook bias-corrected update and returns the parameter history after
/// each step.
pub fn reference_adam_trace(
    param0: &[f64],
    grads: &[Vec<f64>],
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
) -> Vec<Vec<f64>> {
    let n = param0.len();
    let mut p = param0.to_vec();
    let mut m = vec![0.0f64; n];
    let mut v = vec![0.0f64; n];
    let mut history = Vec::with_capacity(grads.len());
    for (step, g) in grads.iter().enumerate() {
        assert_eq!(g.len(), n);
        let t = (step + 1) as f64;
        for i in 0..n {
            m[i] = beta1 * m[i] + (1.0 - beta1) * g[i];
            v[i] = beta2 * v[i] + (1.0 - beta2) * g[i] * g[i];
            let m_hat = m[i] / (1.0 - beta1.powf(t));
            let v_hat = v[i] / (1.0 - beta2.powf(t));
            p[i] -= lr * m_hat / (v_hat.sqrt() + eps);
        }
        history.push(p.clone());
    }
    history
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn finite_diff_on_sum_of_squares() {
        let x = Tensor::<f64>::from_vec(vec![2], vec![1.0, 2.0]).unwrap();
        let g = finite_diff_grad(
            &mut |t| Ok(t.data().iter().map(|v| v * v).sum()),
            &x,
            1e-4,
        )
        .unwrap();
        assert!((g.data()[0] - 2.0).abs() < 1e-8);
        assert!((g.data()[1] - 4.0).abs() < 1e-8);
    }

    #[test]
    fn reference_conv_identity_kernel() {
        let x = Tensor::<f64>::from_vec(vec![1, 1, 3, 3], (1..=9).map(|i| i as f64).collect()).unwrap();
        let w = Tensor::<f64>::from_vec(vec![1, 1, 1, 1], vec![1.0]).unwrap();
        let b = Tensor::<f64>::zeros(&[1]);
        let y = reference_conv(&x, &w, &b, 1, 0);
        assert_eq!(y.data(), x.data());
    }

    #[test]
    fn reference_ssim_identity() {
        let img: Vec<f64> = (0..(16 * 16)).map(|i| (i as f64 * 0.37).sin().abs()).collect();
        let s = reference_ssim_plane(&img, &img, 16, 16);
        assert!((s - 1.0).abs() < 1e-12);
    }

    #[test]
    fn adam_first_step_is_sign_scaled() {
        let p0 = vec![1.0, -2.0];
        let g = vec![vec![0.3, -0.7]];
        let hist = reference_adam_trace(&p0, &g, 0.1, 0.9, 0.999, 1e-8);
        for i in 0..2 {
            let expect = p0[i] - 0.1 * g[0][i] / (g[0][i].abs() + 1e-8);
            assert!((hist[0][i] - expect).abs() < 1e-12);
        }
    }
}
