//! Convolution plumbing: im2col / col2im, small GEMM kernels, and a plain
//! loop-nest reference implementation used to cross-check the fast path.

use crate::error::{PadError, Result};
use crate::tensor::Float;

/// Output extent of a convolution along one axis.
pub fn conv_out_dim(input: usize, kernel: usize, stride: usize, pad: usize) -> Result<usize> {
    if stride == 0 {
        return Err(PadError::InvalidArgument("conv stride must be positive".into()));
    }
    let padded = input + 2 * pad;
    if padded < kernel {
        return Err(PadError::InvalidArgument(format!(
            "kernel {kernel} exceeds padded input {padded}"
        )));
    }
    Ok((padded - kernel) / stride + 1)
}

/// C = A @ B with A `[m, k]`, B `[k, n]`, C `[m, n]`. C is overwritten.
pub fn gemm_nn(a: &[Float], b: &[Float], c: &mut [Float], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    c.fill(0.0);
    for i in 0..m {
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            let crow = &mut c[i * n..(i + 1) * n];
            for j in 0..n {
                crow[j] += av * brow[j];
            }
        }
    }
}

/// C += A @ Bᵀ with A `[m, k]`, B `[n, k]`, C `[m, n]`.
pub fn gemm_nt_acc(a: &[Float], b: &[Float], c: &mut [Float], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), n * k);
    debug_assert_eq!(c.len(), m * n);
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            let mut acc = 0.0;
            for p in 0..k {
                acc += arow[p] * brow[p];
            }
            c[i * n + j] += acc;
        }
    }
}

/// C += Aᵀ @ B with A `[k, m]`, B `[k, n]`, C `[m, n]`.
pub fn gemm_tn_acc(a: &[Float], b: &[Float], c: &mut [Float], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), k * m);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    for p in 0..k {
        let arow = &a[p * m..(p + 1) * m];
        let brow = &b[p * n..(p + 1) * n];
        for i in 0..m {
            let av = arow[i];
            if av == 0.0 {
                continue;
            }
            let crow = &mut c[i * n..(i + 1) * n];
            for j in 0..n {
                crow[j] += av * brow[j];
            }
        }
    }
}

/// Unfold one image `[ci, h, w]` into patch columns `[ci*kh*kw, oh*ow]`.
/// Out-of-bounds taps read zero.
#[allow(clippy::too_many_arguments)]
pub fn im2col(
    x: &[Float],
    ci: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    col: &mut [Float],
) {
    let oh = (h + 2 * pad - kh) / stride + 1;
    let ow = (w + 2 * pad - kw) / stride + 1;
    debug_assert_eq!(x.len(), ci * h * w);
    debug_assert_eq!(col.len(), ci * kh * kw * oh * ow);
    let out_area = oh * ow;
    for c in 0..ci {
        for ky in 0..kh {
            for kx in 0..kw {
                let row = (c * kh + ky) * kw + kx;
                let dst = &mut col[row * out_area..(row + 1) * out_area];
                for oy in 0..oh {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        dst[oy * ow..(oy + 1) * ow].fill(0.0);
                        continue;
                    }
                    let src_row = (c * h + iy as usize) * w;
                    for ox in 0..ow {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        dst[oy * ow + ox] = if ix < 0 || ix >= w as isize {
                            0.0
                        } else {
                            x[src_row + ix as usize]
                        };
                    }
                }
            }
        }
    }
}

/// Fold patch-column gradients back onto the image, accumulating where
/// patches overlap. Exact adjoint of [`im2col`].
#[allow(clippy::too_many_arguments)]
pub fn col2im_acc(
    col: &[Float],
    ci: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    x_grad: &mut [Float],
) {
    let oh = (h + 2 * pad - kh) / stride + 1;
    let ow = (w + 2 * pad - kw) / stride + 1;
    debug_assert_eq!(x_grad.len(), ci * h * w);
    debug_assert_eq!(col.len(), ci * kh * kw * oh * ow);
    let out_area = oh * ow;
    for c in 0..ci {
        for ky in 0..kh {
            for kx in 0..kw {
                let row = (c * kh + ky) * kw + kx;
                let src = &col[row * out_area..(row + 1) * out_area];
                for oy in 0..oh {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let dst_row = (c * h + iy as usize) * w;
                    for ox in 0..ow {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        x_grad[dst_row + ix as usize] += src[oy * ow + ox];
                    }
                }
            }
        }
    }
}

/// Reference convolution as explicit loop nests, kept deliberately naive.
/// `x` is `[n, ci, h, w]`, `weight` is `[co, ci, kh, kw]`, output is
/// `[n, co, oh, ow]`.
#[allow(clippy::too_many_arguments)]
pub fn conv2d_naive(
    x: &[Float],
    n: usize,
    ci: usize,
    h: usize,
    w: usize,
    weight: &[Float],
    co: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
) -> Vec<Float> {
    let oh = (h + 2 * pad - kh) / stride + 1;
    let ow = (w + 2 * pad - kw) / stride + 1;
    let mut out = vec![0.0; n * co * oh * ow];
    for b in 0..n {
        for o in 0..co {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = 0.0;
                    for c in 0..ci {
                        for ky in 0..kh {
                            for kx in 0..kw {
                                let iy = (oy * stride + ky) as isize - pad as isize;
                                let ix = (ox * stride + kx) as isize - pad as isize;
                                if iy < 0 || iy >= h as isize || ix < 0 || ix >= w as isize {
                                    continue;
                                }
                                let xv = x[((b * ci + c) * h + iy as usize) * w + ix as usize];
                                let wv = weight[((o * ci + c) * kh + ky) * kw + kx];
                                acc += xv * wv;
                            }
                        }
                    }
                    out[((b * co + o) * oh + oy) * ow + ox] = acc;
                }
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn out_dim_matches_hand_cases() {
        assert_eq!(conv_out_dim(5, 3, 1, 0).unwrap(), 3);
        assert_eq!(conv_out_dim(5, 3, 1, 1).unwrap(), 5);
        assert_eq!(conv_out_dim(28, 3, 2, 1).unwrap(), 14);
        assert!(conv_out_dim(2, 5, 1, 0).is_err());
        assert!(conv_out_dim(5, 3, 0, 0).is_err());
    }

    #[test]
    fn gemm_nn_small_case() {
        // [1 2; 3 4] @ [5 6; 7 8] = [19 22; 43 50]
        let a = [1.0, 2.0, 3.0, 4.0];
        let b = [5.0, 6.0, 7.0, 8.0];
        let mut c = [0.0; 4];
        gemm_nn(&a, &b, &mut c, 2, 2, 2);
        assert_eq!(c, [19.0, 22.0, 43.0, 50.0]);
    }

    #[test]
    fn gemm_transpose_variants_agree_with_nn() {
        let a = [1.0, -2.0, 0.5, 3.0, 4.0, -1.0]; // [2,3]
        let b = [2.0, 1.0, 0.0, -1.0, 1.5, 2.5];  // [3,2]
        let mut c_nn = [0.0; 4];
        gemm_nn(&a, &b, &mut c_nn, 2, 3, 2);

        // A @ B == A @ (Bᵀ)ᵀ
        let bt = [2.0, 0.0, 1.5, 1.0, -1.0, 2.5]; // [2,3]
        let mut c_nt = [0.0; 4];
        gemm_nt_acc(&a, &bt, &mut c_nt, 2, 3, 2);
        assert_eq!(c_nn, c_nt);

        // A @ B == (Aᵀ)ᵀ @ B
        let at = [1.0, 3.0, -2.0, 4.0, 0.5, -1.0]; // [3,2]
        let mut c_tn = [0.0; 4];
        gemm_tn_acc(&at, &b, &mut c_tn, 2, 3, 2);
        assert_eq!(c_nn, c_tn);
    }

    #[test]
    fn im2col_identity_kernel_is_copy() {
        let x: Vec<Float> = (0..12).map(|i| i as Float).collect(); // [1,3,4]
        let mut col = vec![0.0; 12];
        im2col(&x, 1, 3, 4, 1, 1, 1, 0, &mut col);
        assert_eq!(col, x);
    }

    #[test]
    #[cfg(not(feature = "f32"))]
    fn col2im_is_adjoint_of_im2col() {
        // <im2col(x), y> == <x, col2im(y)> for random-ish fills.
        let (ci, h, w, kh, kw, stride, pad) = (2, 5, 4, 3, 2, 2, 1);
        let oh = (h + 2 * pad - kh) / stride + 1;
        let ow = (w + 2 * pad - kw) / stride + 1;
        let x: Vec<Float> = (0..ci * h * w).map(|i| (i as Float * 0.37).sin()).collect();
        let y: Vec<Float> = (0..ci * kh * kw * oh * ow).map(|i| (i as Float * 0.11).cos()).collect();

        let mut col = vec![0.0; y.len()];
        im2col(&x, ci, h, w, kh, kw, stride, pad, &mut col);
        let lhs: Float = col.iter().zip(&y).map(|(a, b)| a * b).sum();

        let mut xg = vec![0.0; x.len()];
        col2im_acc(&y, ci, h, w, kh, kw, stride, pad, &mut xg);
        let rhs: Float = x.iter().zip(&xg).map(|(a, b)| a * b).sum();

        assert!((lhs - rhs).abs() <= 1e-10 * lhs.abs().max(1.0));
    }

    #[test]
    fn im2col_gemm_matches_naive_conv() {
        let (n, ci, h, w) = (2, 2, 5, 5);
        let (co, kh, kw) = (3, 3, 3);
        for &(stride, pad) in &[(1usize, 0usize), (1, 1), (2, 1)] {
            let x: Vec<Float> = (0..n * ci * h * w).map(|i| ((i * 7 % 13) as Float) - 6.0).collect();
            let wt: Vec<Float> = (0..co * ci * kh * kw).map(|i| ((i * 5 % 11) as Float) * 0.25 - 1.0).collect();
            let oh = conv_out_dim(h, kh, stride, pad).unwrap();
            let ow = conv_out_dim(w, kw, stride, pad).unwrap();

            let want = conv2d_naive(&x, n, ci, h, w, &wt, co, kh, kw, stride, pad);

            let patch = ci * kh * kw;
            let mut got = vec![0.0; n * co * oh * ow];
            let mut col = vec![0.0; patch * oh * ow];
            for b in 0..n {
                im2col(&x[b * ci * h * w..(b + 1) * ci * h * w], ci, h, w, kh, kw, stride, pad, &mut col);
                gemm_nn(&wt, &col, &mut got[b * co * oh * ow..(b + 1) * co * oh * ow], co, patch, oh * ow);
            }
            for (g, v) in got.iter().zip(&want) {
                assert!((g - v).abs() <= 1e-10, "stride={stride} pad={pad}: {g} vs {v}");
            }
        }
    }
}
