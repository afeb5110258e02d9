//! Flat-slice kernels behind the convolution ops.
//!
//! Inner loops are written broadcast-axpy style (`out[j] += a * b[j]`) so the
//! compiler can vectorize them without reassociating float sums; that keeps
//! results bit-deterministic run to run.

use crate::scalar::Scalar;

/// `out[m, n] = a[m, k] @ b[k, n]`, overwriting `out`.
pub fn matmul<T: Scalar>(a: &[T], m: usize, k: usize, b: &[T], n: usize, out: &mut [T]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    for i in 0..m {
        let out_row = &mut out[i * n..(i + 1) * n];
        out_row.fill(T::zero());
        let a_row = &a[i * k..(i + 1) * k];
        for (p, &a_ip) in a_row.iter().enumerate() {
            let b_row = &b[p * n..(p + 1) * n];
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o += a_ip * bv;
            }
        }
    }
}

/// Row-major transpose of an `rows x cols` matrix.
pub fn transpose<T: Scalar>(mat: &[T], rows: usize, cols: usize) -> Vec<T> {
    debug_assert_eq!(mat.len(), rows * cols);
    let mut out = vec![T::zero(); rows * cols];
    const BLOCK: usize = 32;
    for rb in (0..rows).step_by(BLOCK) {
        for cb in (0..cols).step_by(BLOCK) {
            for r in rb..(rb + BLOCK).min(rows) {
                for c in cb..(cb + BLOCK).min(cols) {
                    out[c * rows + r] = mat[r * cols + c];
                }
            }
        }
    }
    out
}

/// Unfolds one NCHW sample into patch columns.
///
/// `input` is `[c, h, w]` flattened; the result is `[c * k * k, oh * ow]`
/// with row index `(ci * k + ky) * k + kx` and column index `oy * ow + ox`.
/// Out-of-bounds taps (from padding) are zero.
#[allow(clippy::too_many_arguments)]
pub fn im2col<T: Scalar>(
    input: &[T],
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    padding: usize,
    oh: usize,
    ow: usize,
    cols: &mut [T],
) {
    debug_assert_eq!(input.len(), c * h * w);
    debug_assert_eq!(cols.len(), c * k * k * oh * ow);
    cols.fill(T::zero());
    for ci in 0..c {
        let plane = &input[ci * h * w..(ci + 1) * h * w];
        for ky in 0..k {
            for kx in 0..k {
                let row = ((ci * k + ky) * k + kx) * oh * ow;
                // valid ox range: 0 <= ox*stride + kx - padding < w
                let (ox_lo, ox_hi) = valid_range(kx, padding, stride, w, ow);
                for oy in 0..oh {
                    let iy = (oy * stride + ky) as isize - padding as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let src_row = &plane[iy as usize * w..(iy as usize + 1) * w];
                    let dst = &mut cols[row + oy * ow..row + (oy + 1) * ow];
                    if stride == 1 {
                        let ix0 = (ox_lo + kx) as isize - padding as isize;
                        let len = ox_hi - ox_lo;
                        dst[ox_lo..ox_hi].copy_from_slice(&src_row[ix0 as usize..ix0 as usize + len]);
                    } else {
                        for ox in ox_lo..ox_hi {
                            let ix = ox * stride + kx - padding;
                            dst[ox] = src_row[ix];
                        }
                    }
                }
            }
        }
    }
}

/// Folds patch columns back into one NCHW sample, accumulating overlaps.
/// Exact adjoint of [`im2col`].
#[allow(clippy::too_many_arguments)]
pub fn col2im<T: Scalar>(
    cols: &[T],
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    padding: usize,
    oh: usize,
    ow: usize,
    out: &mut [T],
) {
    debug_assert_eq!(cols.len(), c * k * k * oh * ow);
    debug_assert_eq!(out.len(), c * h * w);
    out.fill(T::zero());
    for ci in 0..c {
        let plane = &mut out[ci * h * w..(ci + 1) * h * w];
        for ky in 0..k {
            for kx in 0..k {
                let row = ((ci * k + ky) * k + kx) * oh * ow;
                let (ox_lo, ox_hi) = valid_range(kx, padding, stride, w, ow);
                for oy in 0..oh {
                    let iy = (oy * stride + ky) as isize - padding as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let dst_row = &mut plane[iy as usize * w..(iy as usize + 1) * w];
                    let src = &cols[row + oy * ow..row + (oy + 1) * ow];
                    if stride == 1 {
                        let ix0 = ox_lo + kx - padding;
                        for (d, &s) in dst_row[ix0..ix0 + (ox_hi - ox_lo)]
                            .iter_mut()
                            .zip(&src[ox_lo..ox_hi])
                        {
                            *d += s;
                        }
                    } else {
                        for ox in ox_lo..ox_hi {
                            let ix = ox * stride + kx - padding;
                            dst_row[ix] += src[ox];
                        }
                    }
                }
            }
        }
    }
}

/// Half-open `ox` range for which `0 <= ox*stride + kx - padding < w`.
fn valid_range(kx: usize, padding: usize, stride: usize, w: usize, ow: usize) -> (usize, usize) {
    let lo = if kx >= padding {
        0
    } else {
        // smallest ox with ox*stride >= padding - kx
        (padding - kx).div_ceil(stride)
    };
    // largest ox with ox*stride + kx - padding <= w - 1
    let hi_bound = w + padding;
    let hi = if hi_bound > kx {
        ((hi_bound - kx - 1) / stride + 1).min(ow)
    } else {
        0
    };
    (lo.min(hi), hi)
}
