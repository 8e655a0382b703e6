//! Plain numeric kernels behind the differentiable ops.
//!
//! Everything here has a fixed evaluation order so that two runs over the
//! same inputs produce bit-identical results. The entropy coder depends on
//! this: encoder and decoder must derive identical probability tables.

use ndarray::{Array2, Array4, ArrayView2, ArrayView4, Axis};

/// `a · b` with a fixed per-element summation order (k ascending).
pub fn gemm(a: ArrayView2<f64>, b: ArrayView2<f64>) -> Array2<f64> {
    let (m, k) = a.dim();
    let (k2, n) = b.dim();
    assert_eq!(k, k2, "gemm inner dimension mismatch: {k} vs {k2}");
    let a = a.as_standard_layout();
    let b = b.as_standard_layout();
    let a = a.as_slice().expect("standard layout");
    let b = b.as_slice().expect("standard layout");
    let mut out = vec![0.0f64; m * n];
    for (i, row) in out.chunks_exact_mut(n.max(1)).enumerate().take(m) {
        let a_row = &a[i * k..(i + 1) * k];
        for (kk, &aik) in a_row.iter().enumerate() {
            if aik == 0.0 {
                continue;
            }
            let b_row = &b[kk * n..(kk + 1) * n];
            for (o, &bv) in row.iter_mut().zip(b_row) {
                *o += aik * bv;
            }
        }
    }
    if n == 0 {
        return Array2::zeros((m, 0));
    }
    Array2::from_shape_vec((m, n), out).expect("shape")
}

/// Geometry of a 2-D convolution over an NHWC tensor with zero padding.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeom {
    pub n: usize,
    pub h: usize,
    pub w: usize,
    pub c: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeom {
    pub fn out_h(&self) -> usize {
        (self.h + 2 * self.pad - self.k) / self.stride + 1
    }

    pub fn out_w(&self) -> usize {
        (self.w + 2 * self.pad - self.k) / self.stride + 1
    }

    pub fn cols(&self) -> usize {
        self.k * self.k * self.c
    }

    pub fn rows(&self) -> usize {
        self.n * self.out_h() * self.out_w()
    }
}

/// Unfolds patches into rows ordered (n, oh, ow) with columns (kh, kw, c).
pub fn im2col(x: ArrayView4<f64>, g: &ConvGeom) -> Array2<f64> {
    let x = x.as_standard_layout();
    let xs = x.as_slice().expect("standard layout");
    let (oh, ow) = (g.out_h(), g.out_w());
    let cols = g.cols();
    let mut out = vec![0.0f64; g.rows() * cols];
    let mut row = 0usize;
    for n in 0..g.n {
        for oy in 0..oh {
            for ox in 0..ow {
                let base = row * cols;
                for ky in 0..g.k {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    for kx in 0..g.k {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix < 0 || ix >= g.w as isize {
                            continue;
                        }
                        let src = ((n * g.h + iy as usize) * g.w + ix as usize) * g.c;
                        let dst = base + (ky * g.k + kx) * g.c;
                        out[dst..dst + g.c].copy_from_slice(&xs[src..src + g.c]);
                    }
                }
                row += 1;
            }
        }
    }
    Array2::from_shape_vec((g.rows(), cols), out).expect("shape")
}

/// Adjoint of [`im2col`]: scatters rows back, summing overlaps.
pub fn col2im(cols: ArrayView2<f64>, g: &ConvGeom) -> Array4<f64> {
    let cols = cols.as_standard_layout();
    let cs = cols.as_slice().expect("standard layout");
    let (oh, ow) = (g.out_h(), g.out_w());
    let ncol = g.cols();
    let mut out = vec![0.0f64; g.n * g.h * g.w * g.c];
    let mut row = 0usize;
    for n in 0..g.n {
        for oy in 0..oh {
            for ox in 0..ow {
                let base = row * ncol;
                for ky in 0..g.k {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    for kx in 0..g.k {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix < 0 || ix >= g.w as isize {
                            continue;
                        }
                        let dst = ((n * g.h + iy as usize) * g.w + ix as usize) * g.c;
                        let src = base + (ky * g.k + kx) * g.c;
                        for (o, &v) in out[dst..dst + g.c].iter_mut().zip(&cs[src..src + g.c]) {
                            *o += v;
                        }
                    }
                }
                row += 1;
            }
        }
    }
    Array4::from_shape_vec((g.n, g.h, g.w, g.c), out).expect("shape")
}

/// Nearest-neighbour upsampling by 2 of an NHWC tensor, cropped to `(out_h, out_w)`.
///
/// Output pixel `(y, x)` copies input pixel `(y / 2, x / 2)`.
pub fn upsample2(x: ArrayView4<f64>, out_h: usize, out_w: usize) -> Array4<f64> {
    let (n, h, w, c) = x.dim();
    assert!(out_h.div_ceil(2) == h && out_w.div_ceil(2) == w, "upsample2 size mismatch");
    Array4::from_shape_fn((n, out_h, out_w, c), |(b, y, xx, ch)| x[[b, y / 2, xx / 2, ch]])
}

/// Adjoint of [`upsample2`]: sums each 2x2 block (truncated at odd borders).
pub fn sum_pool2(x: ArrayView4<f64>) -> Array4<f64> {
    let (n, h, w, c) = x.dim();
    let mut out = Array4::zeros((n, h.div_ceil(2), w.div_ceil(2), c));
    for ((b, y, xx, ch), v) in x.indexed_iter() {
        out[[b, y / 2, xx / 2, ch]] += *v;
    }
    out
}

/// 2x2 box sum with stride 2 that drops a trailing odd row/column.
pub fn sum_pool2_trunc(x: ArrayView4<f64>) -> Array4<f64> {
    let (n, h, w, c) = x.dim();
    let (oh, ow) = (h / 2, w / 2);
    let mut out = Array4::zeros((n, oh, ow, c));
    for ((b, y, xx, ch), v) in x.indexed_iter() {
        if y / 2 < oh && xx / 2 < ow {
            out[[b, y / 2, xx / 2, ch]] += *v;
        }
    }
    out
}

/// Adjoint of [`sum_pool2_trunc`]: spreads each value over its 2x2 block,
/// zero-filling the dropped border of an `(h, w)` output.
pub fn spread2_trunc(x: ArrayView4<f64>, h: usize, w: usize) -> Array4<f64> {
    let (n, oh, ow, c) = x.dim();
    assert!(h / 2 == oh && w / 2 == ow, "spread2_trunc size mismatch");
    Array4::from_shape_fn(
        (n, h, w, c),
        |(b, y, xx, ch)| {
            if y / 2 < oh && xx / 2 < ow {
                x[[b, y / 2, xx / 2, ch]]
            } else {
                0.0
            }
        },
    )
}

fn filter_axis_valid(x: ArrayView4<f64>, taps: &[f64], axis: usize) -> Array4<f64> {
    let k = taps.len();
    let mut shape = [x.dim().0, x.dim().1, x.dim().2, x.dim().3];
    assert!(shape[axis] >= k, "blur input smaller than the window");
    shape[axis] = shape[axis] - k + 1;
    let mut out = Array4::zeros(shape);
    for (t, &tap) in taps.iter().enumerate() {
        let len = shape[axis];
        let src = x.slice_axis(Axis(axis), (t..t + len).into());
        out.scaled_add(tap, &src);
    }
    out
}

fn filter_axis_full(x: ArrayView4<f64>, taps: &[f64], axis: usize) -> Array4<f64> {
    let k = taps.len();
    let mut shape = [x.dim().0, x.dim().1, x.dim().2, x.dim().3];
    let len = shape[axis];
    shape[axis] = len + k - 1;
    let mut out = Array4::zeros(shape);
    for (t, &tap) in taps.iter().enumerate() {
        let mut dst = out.slice_axis_mut(Axis(axis), (t..t + len).into());
        dst.scaled_add(tap, &x);
    }
    out
}

/// Separable "valid" correlation along H then W with the same 1-D taps.
pub fn blur_valid(x: ArrayView4<f64>, taps: &[f64]) -> Array4<f64> {
    let tmp = filter_axis_valid(x, taps, 1);
    filter_axis_valid(tmp.view(), taps, 2)
}

/// Adjoint of [`blur_valid`].
pub fn blur_valid_adjoint(x: ArrayView4<f64>, taps: &[f64]) -> Array4<f64> {
    let tmp = filter_axis_full(x, taps, 2);
    filter_axis_full(tmp.view(), taps, 1)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array;

    fn naive_matmul(a: &Array2<f64>, b: &Array2<f64>) -> Array2<f64> {
        let (m, k) = a.dim();
        let n = b.dim().1;
        Array2::from_shape_fn((m, n), |(i, j)| (0..k).map(|t| a[[i, t]] * b[[t, j]]).sum())
    }

    fn ramp4(shape: (usize, usize, usize, usize)) -> Array4<f64> {
        let len = shape.0 * shape.1 * shape.2 * shape.3;
        Array::from_iter((0..len).map(|v| ((v * 37 % 101) as f64) / 17.0 - 2.0)).into_shape_with_order(shape).unwrap()
    }

    #[test]
    fn gemm_matches_naive() {
        let a = Array2::from_shape_fn((5, 7), |(i, j)| (i * 7 + j) as f64 * 0.1 - 1.0);
        let b = Array2::from_shape_fn((7, 3), |(i, j)| (i as f64 - j as f64) * 0.3);
        let got = gemm(a.view(), b.view());
        let want = naive_matmul(&a, &b);
        for (g, w) in got.iter().zip(want.iter()) {
            assert!((g - w).abs() < 1e-12);
        }
        // transposed views go through the same path
        let got_t = gemm(b.t(), a.t());
        for (g, w) in got_t.iter().zip(want.t().iter()) {
            assert!((g - w).abs() < 1e-12);
        }
    }

    #[test]
    fn im2col_col2im_are_adjoint() {
        let g = ConvGeom { n: 2, h: 5, w: 6, c: 3, k: 3, stride: 2, pad: 1 };
        let x = ramp4((2, 5, 6, 3));
        let cols = im2col(x.view(), &g);
        let y = Array2::from_shape_fn(cols.dim(), |(i, j)| ((i * 13 + j * 7) % 11) as f64 - 5.0);
        let lhs: f64 = (&cols * &y).sum();
        let rhs: f64 = (&x * &col2im(y.view(), &g)).sum();
        assert!((lhs - rhs).abs() < 1e-9, "{lhs} vs {rhs}");
        assert_eq!(cols.dim(), (2 * 3 * 3, 27));
    }

    #[test]
    fn upsample_and_sum_pool_are_adjoint() {
        let x = ramp4((1, 3, 2, 2));
        let up = upsample2(x.view(), 5, 4);
        let y = ramp4((1, 5, 4, 2)).mapv(|v| v * 0.5 + 1.0);
        let lhs = (&up * &y).sum();
        let rhs = (&x * &sum_pool2(y.view())).sum();
        assert!((lhs - rhs).abs() < 1e-9);
        assert_eq!(up[[0, 4, 3, 1]], x[[0, 2, 1, 1]]);
    }

    #[test]
    fn truncated_pool_and_spread_are_adjoint() {
        let x = ramp4((2, 5, 7, 1));
        let p = sum_pool2_trunc(x.view());
        assert_eq!(p.dim(), (2, 2, 3, 1));
        let y = ramp4((2, 2, 3, 1));
        let lhs = (&p * &y).sum();
        let rhs = (&x * &spread2_trunc(y.view(), 5, 7)).sum();
        assert!((lhs - rhs).abs() < 1e-9);
    }

    #[test]
    fn blur_and_adjoint() {
        let taps = [0.25, 0.5, 0.25];
        let x = ramp4((1, 6, 5, 2));
        let b = blur_valid(x.view(), &taps);
        assert_eq!(b.dim(), (1, 4, 3, 2));
        let y = ramp4((1, 4, 3, 2));
        let lhs = (&b * &y).sum();
        let rhs = (&x * &blur_valid_adjoint(y.view(), &taps)).sum();
        assert!((lhs - rhs).abs() < 1e-9);
        // constant input stays constant under a normalized window
        let ones = Array4::from_elem((1, 5, 5, 1), 2.0);
        assert!(blur_valid(ones.view(), &taps).iter().all(|v| (v - 2.0).abs() < 1e-12));
    }
}
