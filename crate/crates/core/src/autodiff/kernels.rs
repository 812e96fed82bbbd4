//! Dense numeric kernels shared by the forward and backward rules.

use crate::tensor::Scalar;

const COL_BLOCK: usize = 256;

/// `c[m×n] += a[m×k] · b[k×n]`, all row-major.
pub fn gemm_nn<T: Scalar>(m: usize, k: usize, n: usize, a: &[T], b: &[T], c: &mut [T]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    for j0 in (0..n).step_by(COL_BLOCK) {
        let j1 = (j0 + COL_BLOCK).min(n);
        for i in 0..m {
            let c_row = &mut c[i * n + j0..i * n + j1];
            let a_row = &a[i * k..(i + 1) * k];
            for (p, &av) in a_row.iter().enumerate() {
                if av == T::zero() {
                    continue;
                }
                let b_row = &b[p * n + j0..p * n + j1];
                for (cv, &bv) in c_row.iter_mut().zip(b_row) {
                    *cv = *cv + av * bv;
                }
            }
        }
    }
}

/// `c[m×n] += a[m×k] · b[n×k]ᵀ`.
pub fn gemm_nt<T: Scalar>(m: usize, k: usize, n: usize, a: &[T], b: &[T], c: &mut [T]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), n * k);
    debug_assert_eq!(c.len(), m * n);
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let b_row = &b[j * k..(j + 1) * k];
            c[i * n + j] = c[i * n + j] + dot(a_row, b_row);
        }
    }
}

/// `c[m×n] += a[k×m]ᵀ · b[k×n]`.
pub fn gemm_tn<T: Scalar>(m: usize, k: usize, n: usize, a: &[T], b: &[T], c: &mut [T]) {
    debug_assert_eq!(a.len(), k * m);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    for j0 in (0..n).step_by(COL_BLOCK) {
        let j1 = (j0 + COL_BLOCK).min(n);
        for i in 0..m {
            let c_row = &mut c[i * n + j0..i * n + j1];
            for p in 0..k {
                let av = a[p * m + i];
                if av == T::zero() {
                    continue;
                }
                let b_row = &b[p * n + j0..p * n + j1];
                for (cv, &bv) in c_row.iter_mut().zip(b_row) {
                    *cv = *cv + av * bv;
                }
            }
        }
    }
}

/// Dot product with eight independent accumulators so the loop vectorizes.
/// The summation order is fixed, so results are reproducible.
#[inline]
pub fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    const LANES: usize = 8;
    let n = a.len().min(b.len());
    let (a, b) = (&a[..n], &b[..n]);
    let mut acc = [T::zero(); LANES];
    let ca = a.chunks_exact(LANES);
    let cb = b.chunks_exact(LANES);
    let (ta, tb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        for l in 0..LANES {
            acc[l] = acc[l] + x[l] * y[l];
        }
    }
    let mut tail = T::zero();
    for (&x, &y) in ta.iter().zip(tb) {
        tail = tail + x * y;
    }
    let mut sum = T::zero();
    for v in acc {
        sum = sum + v;
    }
    sum + tail
}

/// Geometry of one 2-D convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub in_c: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeom {
    pub fn new(
        in_c: usize,
        in_h: usize,
        in_w: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
    ) -> Option<Self> {
        if kernel == 0 || stride == 0 || in_h + 2 * pad < kernel || in_w + 2 * pad < kernel {
            return None;
        }
        Some(Self {
            in_c,
            in_h,
            in_w,
            kernel,
            stride,
            pad,
            out_h: (in_h + 2 * pad - kernel) / stride + 1,
            out_w: (in_w + 2 * pad - kernel) / stride + 1,
        })
    }

    pub fn col_rows(&self) -> usize {
        self.in_c * self.kernel * self.kernel
    }

    pub fn out_positions(&self) -> usize {
        self.out_h * self.out_w
    }
}

/// Unroll one image (C×H×W) into a `(C·k·k) × (OH·OW)` patch matrix.
pub fn im2col<T: Scalar>(g: &ConvGeom, x: &[T], col: &mut [T]) {
    let k = g.kernel;
    let p = g.out_positions();
    for c in 0..g.in_c {
        let plane = &x[c * g.in_h * g.in_w..(c + 1) * g.in_h * g.in_w];
        for kh in 0..k {
            for kw in 0..k {
                let row = &mut col[((c * k + kh) * k + kw) * p..][..p];
                for oh in 0..g.out_h {
                    let ih = (oh * g.stride + kh) as isize - g.pad as isize;
                    let dst = &mut row[oh * g.out_w..(oh + 1) * g.out_w];
                    if ih < 0 || ih >= g.in_h as isize {
                        dst.fill(T::zero());
                        continue;
                    }
                    let src = &plane[ih as usize * g.in_w..(ih as usize + 1) * g.in_w];
                    for (ow, d) in dst.iter_mut().enumerate() {
                        let iw = (ow * g.stride + kw) as isize - g.pad as isize;
                        *d = if iw < 0 || iw >= g.in_w as isize {
                            T::zero()
                        } else {
                            src[iw as usize]
                        };
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatter-add a patch matrix back onto an image.
pub fn col2im<T: Scalar>(g: &ConvGeom, col: &[T], x: &mut [T]) {
    let k = g.kernel;
    let p = g.out_positions();
    for c in 0..g.in_c {
        let plane = &mut x[c * g.in_h * g.in_w..(c + 1) * g.in_h * g.in_w];
        for kh in 0..k {
            for kw in 0..k {
                let row = &col[((c * k + kh) * k + kw) * p..][..p];
                for oh in 0..g.out_h {
                    let ih = (oh * g.stride + kh) as isize - g.pad as isize;
                    if ih < 0 || ih >= g.in_h as isize {
                        continue;
                    }
                    let dst = &mut plane[ih as usize * g.in_w..(ih as usize + 1) * g.in_w];
                    for ow in 0..g.out_w {
                        let iw = (ow * g.stride + kw) as isize - g.pad as isize;
                        if iw >= 0 && iw < g.in_w as isize {
                            dst[iw as usize] = dst[iw as usize] + row[oh * g.out_w + ow];
                        }
                    }
                }
            }
        }
    }
}

/// Direct quadruple-loop convolution of a batch. Kept as the reference the
/// unrolled path is tested against.
pub fn conv2d_naive<T: Scalar>(
    x: &[T],
    batch: usize,
    g: &ConvGeom,
    w: &[T],
    bias: Option<&[T]>,
    out_c: usize,
) -> Vec<T> {
    let k = g.kernel;
    let mut out = vec![T::zero(); batch * out_c * g.out_positions()];
    for b in 0..batch {
        for co in 0..out_c {
            for oh in 0..g.out_h {
                for ow in 0..g.out_w {
                    let mut acc = bias.map_or(T::zero(), |bv| bv[co]);
                    for ci in 0..g.in_c {
                        for kh in 0..k {
                            for kw in 0..k {
                                let ih = (oh * g.stride + kh) as isize - g.pad as isize;
                                let iw = (ow * g.stride + kw) as isize - g.pad as isize;
                                if ih < 0
                                    || iw < 0
                                    || ih >= g.in_h as isize
                                    || iw >= g.in_w as isize
                                {
                                    continue;
                                }
                                let xv = x[((b * g.in_c + ci) * g.in_h + ih as usize) * g.in_w
                                    + iw as usize];
                                let wv = w[((co * g.in_c + ci) * k + kh) * k + kw];
                                acc = acc + xv * wv;
                            }
                        }
                    }
                    out[((b * out_c + co) * g.out_h + oh) * g.out_w + ow] = acc;
                }
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive_mm(m: usize, k: usize, n: usize, a: &[f64], b: &[f64]) -> Vec<f64> {
        let mut c = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                for p in 0..k {
                    c[i * n + j] += a[i * k + p] * b[p * n + j];
                }
            }
        }
        c
    }

    fn transpose(r: usize, c: usize, a: &[f64]) -> Vec<f64> {
        let mut t = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                t[j * r + i] = a[i * c + j];
            }
        }
        t
    }

    #[test]
    fn gemm_variants_agree_with_naive() {
        let (m, k, n) = (5, 7, 300);
        let a: Vec<f64> = (0..m * k).map(|i| (i as f64 * 0.37).sin()).collect();
        let b: Vec<f64> = (0..k * n).map(|i| (i as f64 * 0.11).cos()).collect();
        let want = naive_mm(m, k, n, &a, &b);

        let mut c = vec![0.0; m * n];
        gemm_nn(m, k, n, &a, &b, &mut c);
        let mut c2 = vec![0.0; m * n];
        gemm_nt(m, k, n, &a, &transpose(k, n, &b), &mut c2);
        let mut c3 = vec![0.0; m * n];
        gemm_tn(m, k, n, &transpose(m, k, &a), &b, &mut c3);
        for i in 0..m * n {
            assert!((c[i] - want[i]).abs() < 1e-12);
            assert!((c2[i] - want[i]).abs() < 1e-12);
            assert!((c3[i] - want[i]).abs() < 1e-12);
        }
    }

    #[test]
    fn col2im_is_adjoint_of_im2col() {
        // <im2col(x), y> == <x, col2im(y)>
        let g = ConvGeom::new(2, 5, 6, 3, 2, 1).unwrap();
        let x: Vec<f64> = (0..2 * 5 * 6).map(|i| (i as f64 * 0.3).sin()).collect();
        let y: Vec<f64> = (0..g.col_rows() * g.out_positions())
            .map(|i| (i as f64 * 0.7).cos())
            .collect();
        let mut col = vec![0.0; y.len()];
        im2col(&g, &x, &mut col);
        let mut back = vec![0.0; x.len()];
        col2im(&g, &y, &mut back);
        let lhs: f64 = col.iter().zip(&y).map(|(a, b)| a * b).sum();
        let rhs: f64 = x.iter().zip(&back).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-10);
    }
}
