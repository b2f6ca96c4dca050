//! Raw slice kernels shared by the graph ops.

use crate::scalar::Scalar;

/// `c[m,n] (+)= op(a)[m,k] * op(b)[k,n]`.
///
/// `a_t` means `a` is stored as `[k,m]`; `b_t` means `b` is stored as `[n,k]`.
#[allow(clippy::too_many_arguments)]
pub fn matmul<S: Scalar>(
    a: &[S],
    a_t: bool,
    b: &[S],
    b_t: bool,
    m: usize,
    k: usize,
    n: usize,
    c: &mut [S],
    accumulate: bool,
) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        if !accumulate {
            c[..m * n].iter_mut().for_each(|v| *v = S::zero());
        }
        return;
    }
    let (rsa, csa) = if a_t { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_t { (1, k as isize) } else { (n as isize, 1) };
    let beta = if accumulate { S::one() } else { S::zero() };
    // SAFETY: the assert above bounds every strided access.
    unsafe {
        S::gemm(
            m,
            k,
            n,
            S::one(),
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Sliding-window geometry of one image plane stack.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub kernel_h: usize,
    pub kernel_w: usize,
    pub stride: usize,
    pub pad: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeometry {
    pub fn new(
        channels: usize,
        height: usize,
        width: usize,
        kernel_h: usize,
        kernel_w: usize,
        stride: usize,
        pad: usize,
    ) -> Option<Self> {
        if stride == 0 || kernel_h > height + 2 * pad || kernel_w > width + 2 * pad {
            return None;
        }
        Some(Self {
            channels,
            height,
            width,
            kernel_h,
            kernel_w,
            stride,
            pad,
            out_h: (height + 2 * pad - kernel_h) / stride + 1,
            out_w: (width + 2 * pad - kernel_w) / stride + 1,
        })
    }

    pub fn col_rows(&self) -> usize {
        self.channels * self.kernel_h * self.kernel_w
    }

    pub fn col_cols(&self) -> usize {
        self.out_h * self.out_w
    }
}

/// Unfolds `x[C,H,W]` into `cols[C*kh*kw, out_h*out_w]`.
pub fn im2col<S: Scalar>(x: &[S], g: &ConvGeometry, cols: &mut [S]) {
    im2col_strided(x, g, cols, g.col_cols());
}

/// [`im2col`] writing rows `ld` apart, so several images can share one
/// column matrix `[rows, N * out_hw]`.
pub fn im2col_strided<S: Scalar>(x: &[S], g: &ConvGeometry, cols: &mut [S], ld: usize) {
    let ncols = g.col_cols();
    for c in 0..g.channels {
        let plane = &x[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ki in 0..g.kernel_h {
            for kj in 0..g.kernel_w {
                let row = (c * g.kernel_h + ki) * g.kernel_w + kj;
                let dst = &mut cols[row * ld..row * ld + ncols];
                let (lo, hi) = valid_outputs(kj, g.stride, g.pad, g.width, g.out_w);
                for oy in 0..g.out_h {
                    let out_row = &mut dst[oy * g.out_w..(oy + 1) * g.out_w];
                    let Some(iy) = input_index(oy, ki, g.stride, g.pad, g.height) else {
                        out_row.fill(S::zero());
                        continue;
                    };
                    let src = &plane[iy * g.width..(iy + 1) * g.width];
                    out_row[..lo].fill(S::zero());
                    out_row[hi..].fill(S::zero());
                    if lo < hi {
                        let start = lo * g.stride + kj - g.pad;
                        if g.stride == 1 {
                            out_row[lo..hi].copy_from_slice(&src[start..start + hi - lo]);
                        } else {
                            for (v, &s) in out_row[lo..hi].iter_mut().zip(src[start..].iter().step_by(g.stride)) {
                                *v = s;
                            }
                        }
                    }
                }
            }
        }
    }
}

/// `iy = oy * stride + k - pad` when it lands inside `0..len`.
fn input_index(o: usize, k: usize, stride: usize, pad: usize, len: usize) -> Option<usize> {
    (o * stride + k).checked_sub(pad).filter(|&i| i < len)
}

/// Output positions `lo..hi` whose input column `o * stride + k - pad` is in bounds.
fn valid_outputs(k: usize, stride: usize, pad: usize, len: usize, out: usize) -> (usize, usize) {
    let lo = pad.saturating_sub(k).div_ceil(stride);
    let hi = if len + pad > k { ((len + pad - k - 1) / stride + 1).min(out) } else { 0 };
    (lo.min(hi), hi)
}

/// Adjoint of [`im2col`]: scatters `cols` back onto `x`, accumulating.
pub fn col2im<S: Scalar>(cols: &[S], g: &ConvGeometry, x: &mut [S]) {
    col2im_strided(cols, g, x, g.col_cols());
}

/// Adjoint of [`im2col_strided`].
pub fn col2im_strided<S: Scalar>(cols: &[S], g: &ConvGeometry, x: &mut [S], ld: usize) {
    let ncols = g.col_cols();
    for c in 0..g.channels {
        let plane = &mut x[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ki in 0..g.kernel_h {
            for kj in 0..g.kernel_w {
                let row = (c * g.kernel_h + ki) * g.kernel_w + kj;
                let src = &cols[row * ld..row * ld + ncols];
                let (lo, hi) = valid_outputs(kj, g.stride, g.pad, g.width, g.out_w);
                if lo >= hi {
                    continue;
                }
                let start = lo * g.stride + kj - g.pad;
                for oy in 0..g.out_h {
                    let Some(iy) = input_index(oy, ki, g.stride, g.pad, g.height) else {
                        continue;
                    };
                    let dst = &mut plane[iy * g.width + start..(iy + 1) * g.width];
                    let s_row = &src[oy * g.out_w + lo..oy * g.out_w + hi];
                    for (d, &v) in dst.iter_mut().step_by(g.stride).zip(s_row) {
                        *d = *d + v;
                    }
                }
            }
        }
    }
}

/// Swaps the two leading axes of a row-major `[a, b, inner]` buffer.
pub fn swap_leading<S: Scalar>(src: &[S], a: usize, b: usize, inner: usize) -> Vec<S> {
    let mut dst = vec![S::zero(); a * b * inner];
    for i in 0..a {
        for j in 0..b {
            let from = (i * b + j) * inner;
            let to = (j * a + i) * inner;
            dst[to..to + inner].copy_from_slice(&src[from..from + inner]);
        }
    }
    dst
}

/// Row-major strides of `shape`.
pub fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

/// Reorders axes: `out.shape[i] = shape[perm[i]]`.
pub fn permute<S: Scalar>(x: &[S], shape: &[usize], perm: &[usize]) -> (Vec<usize>, Vec<S>) {
    let in_strides = strides(shape);
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let src_strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let n = x.len();
    let mut out = Vec::with_capacity(n);
    let mut idx = vec![0usize; out_shape.len()];
    for _ in 0..n {
        let off: usize = idx.iter().zip(&src_strides).map(|(i, s)| i * s).sum();
        out.push(x[off]);
        for ax in (0..idx.len()).rev() {
            idx[ax] += 1;
            if idx[ax] < out_shape[ax] {
                break;
            }
            idx[ax] = 0;
        }
    }
    (out_shape, out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matmul_transposes_agree() {
        let a = [1.0f64, 2.0, 3.0, 4.0, 5.0, 6.0]; // [2,3]
        let at = [1.0f64, 4.0, 2.0, 5.0, 3.0, 6.0]; // [3,2]
        let b = [1.0f64, 0.0, 0.0, 1.0, 1.0, 1.0]; // [3,2]
        let bt = [1.0f64, 0.0, 1.0, 0.0, 1.0, 1.0]; // [2,3]
        let mut c1 = [0.0; 4];
        let mut c2 = [0.0; 4];
        let mut c3 = [0.0; 4];
        matmul(&a, false, &b, false, 2, 3, 2, &mut c1, false);
        matmul(&at, true, &b, false, 2, 3, 2, &mut c2, false);
        matmul(&a, false, &bt, true, 2, 3, 2, &mut c3, false);
        assert_eq!(c1, [4.0, 5.0, 10.0, 11.0]);
        assert_eq!(c1, c2);
        assert_eq!(c1, c3);
    }

    #[test]
    fn col2im_is_adjoint_of_im2col() {
        let g = ConvGeometry::new(2, 5, 4, 3, 3, 2, 1).unwrap();
        let x: Vec<f64> = (0..40).map(|i| (i as f64 * 0.37).sin()).collect();
        let y: Vec<f64> = (0..g.col_rows() * g.col_cols())
            .map(|i| (i as f64 * 0.11).cos())
            .collect();
        let mut cols = vec![0.0; y.len()];
        im2col(&x, &g, &mut cols);
        let lhs: f64 = cols.iter().zip(&y).map(|(a, b)| a * b).sum();
        let mut back = vec![0.0; x.len()];
        col2im(&y, &g, &mut back);
        let rhs: f64 = back.iter().zip(&x).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-12);
    }

    #[test]
    fn permute_swaps_matrix() {
        let (shape, out) = permute(&[1.0f32, 2.0, 3.0, 4.0, 5.0, 6.0], &[2, 3], &[1, 0]);
        assert_eq!(shape, vec![3, 2]);
        assert_eq!(out, vec![1.0, 4.0, 2.0, 5.0, 3.0, 6.0]);
    }
}
