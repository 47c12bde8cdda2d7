//! Dense kernels shared by the forward and backward passes.

use ndarray::{Array2, Array3, ArrayView3};

use crate::scalar::{c, Scalar};

/// Geometry of a square 2-D convolution over an `[H, W, C]` map.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeometry {
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

impl ConvGeometry {
    pub fn output_extent(&self, h: usize, w: usize) -> (usize, usize) {
        let oh = (h + 2 * self.padding - self.kernel) / self.stride + 1;
        let ow = (w + 2 * self.padding - self.kernel) / self.stride + 1;
        (oh, ow)
    }
}

/// Unfolds `x` into a `[Ho*Wo, k*k*C]` patch matrix, patch columns ordered
/// `(ky, kx, c)` to match a `[k, k, Cin, Cout]` weight layout.
pub fn im2col<T: Scalar>(x: ArrayView3<T>, g: ConvGeometry) -> Array2<T> {
    let (h, w, ch) = x.dim();
    let (oh, ow) = g.output_extent(h, w);
    let k = g.kernel;
    let mut cols = Array2::<T>::zeros((oh * ow, k * k * ch));
    let x = x.as_standard_layout();
    let xs = x.as_slice().expect("standard layout");
    let cs = cols.as_slice_mut().expect("fresh array");
    let row_len = k * k * ch;
    for oy in 0..oh {
        for ox in 0..ow {
            let row = (oy * ow + ox) * row_len;
            for ky in 0..k {
                let iy = (oy * g.stride + ky) as isize - g.padding as isize;
                if iy < 0 || iy >= h as isize {
                    continue;
                }
                for kx in 0..k {
                    let ix = (ox * g.stride + kx) as isize - g.padding as isize;
                    if ix < 0 || ix >= w as isize {
                        continue;
                    }
                    let src = (iy as usize * w + ix as usize) * ch;
                    let dst = row + (ky * k + kx) * ch;
                    cs[dst..dst + ch].copy_from_slice(&xs[src..src + ch]);
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`]: scatters patch gradients back onto the input grid.
pub fn col2im<T: Scalar>(cols: &Array2<T>, shape: (usize, usize, usize), g: ConvGeometry) -> Array3<T> {
    let (h, w, ch) = shape;
    let (oh, ow) = g.output_extent(h, w);
    let k = g.kernel;
    let mut x = Array3::<T>::zeros(shape);
    let cols = cols.as_standard_layout();
    let cs = cols.as_slice().expect("standard layout");
    let xs = x.as_slice_mut().expect("fresh array");
    let row_len = k * k * ch;
    for oy in 0..oh {
        for ox in 0..ow {
            let row = (oy * ow + ox) * row_len;
            for ky in 0..k {
                let iy = (oy * g.stride + ky) as isize - g.padding as isize;
                if iy < 0 || iy >= h as isize {
                    continue;
                }
                for kx in 0..k {
                    let ix = (ox * g.stride + kx) as isize - g.padding as isize;
                    if ix < 0 || ix >= w as isize {
                        continue;
                    }
                    let dst = (iy as usize * w + ix as usize) * ch;
                    let src = row + (ky * k + kx) * ch;
                    for i in 0..ch {
                        xs[dst + i] = xs[dst + i] + cs[src + i];
                    }
                }
            }
        }
    }
    x
}

/// One-axis bilinear resampling matrix `[out, in]` using half-pixel centres
/// (`align_corners = false`). Negative source coordinates clamp to zero.
pub fn bilinear_matrix<T: Scalar>(input: usize, output: usize) -> Array2<T> {
    let mut m = Array2::<T>::zeros((output, input));
    let scale = input as f64 / output as f64;
    for i in 0..output {
        let src = ((i as f64 + 0.5) * scale - 0.5).max(0.0);
        let i0 = (src.floor() as usize).min(input - 1);
        let i1 = (i0 + 1).min(input - 1);
        let frac = src - i0 as f64;
        m[[i, i0]] = m[[i, i0]] + c::<T>(1.0 - frac);
        m[[i, i1]] = m[[i, i1]] + c::<T>(frac);
    }
    m
}

/// Resamples an `[H, W, C]` map with per-axis matrices `ry: [h, H]`, `rx: [w, W]`.
pub fn resize<T: Scalar>(x: ArrayView3<T>, ry: &Array2<T>, rx: &Array2<T>) -> Array3<T> {
    let (h, w, ch) = x.dim();
    let (oh, ow) = (ry.nrows(), rx.nrows());
    let x2 = x
        .as_standard_layout()
        .into_owned()
        .into_shape_with_order((h, w * ch))
        .expect("contiguous");
    let rows = ry.dot(&x2).into_shape_with_order((oh, w, ch)).expect("contiguous");
    let mut out = Array3::<T>::zeros((oh, ow, ch));
    for i in 0..oh {
        let plane = rx.dot(&rows.index_axis(ndarray::Axis(0), i));
        out.index_axis_mut(ndarray::Axis(0), i).assign(&plane);
    }
    out
}

/// Adjoint of [`resize`].
pub fn resize_adjoint<T: Scalar>(
    g: ArrayView3<T>,
    ry: &Array2<T>,
    rx: &Array2<T>,
    in_shape: (usize, usize, usize),
) -> Array3<T> {
    let (h, w, ch) = in_shape;
    let oh = ry.nrows();
    let rxt = rx.t();
    let mut rows = Array3::<T>::zeros((oh, w, ch));
    for i in 0..oh {
        let plane = rxt.dot(&g.index_axis(ndarray::Axis(0), i));
        rows.index_axis_mut(ndarray::Axis(0), i).assign(&plane);
    }
    let rows2 = rows.into_shape_with_order((oh, w * ch)).expect("contiguous");
    ry.t().dot(&rows2).into_shape_with_order((h, w, ch)).expect("contiguous")
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array3;

    #[test]
    fn bilinear_rows_are_convex_weights() {
        for (i, o) in [(16, 8), (8, 16), (5, 3), (2, 1), (1, 4)] {
            let m = bilinear_matrix::<f64>(i, o);
            for row in m.rows() {
                assert!((row.sum() - 1.0).abs() < 1e-12);
                assert!(row.iter().all(|&w| w >= 0.0));
            }
        }
        let m = bilinear_matrix::<f64>(2, 1);
        assert_eq!(m.row(0).to_vec(), vec![0.5, 0.5]);
    }

    #[test]
    fn im2col_matches_direct_convolution() {
        let x = Array3::from_shape_fn((5, 6, 2), |(y, x, c)| (y * 13 + x * 7 + c * 3) as f64 % 5.0 - 2.0);
        let w = ndarray::Array4::from_shape_fn((3, 3, 2, 3), |(a, b, c, d)| ((a + 2 * b + 3 * c + 5 * d) % 7) as f64 - 3.0);
        let g = ConvGeometry { kernel: 3, stride: 2, padding: 1 };
        let (oh, ow) = g.output_extent(5, 6);
        let cols = im2col(x.view(), g);
        let out = cols.dot(&w.view().into_shape_with_order((18, 3)).unwrap());
        for oy in 0..oh {
            for ox in 0..ow {
                for co in 0..3 {
                    let mut acc = 0.0;
                    for ky in 0..3 {
                        for kx in 0..3 {
                            let iy = (oy * 2 + ky) as isize - 1;
                            let ix = (ox * 2 + kx) as isize - 1;
                            if iy < 0 || ix < 0 || iy >= 5 || ix >= 6 {
                                continue;
                            }
                            for ci in 0..2 {
                                acc += x[[iy as usize, ix as usize, ci]] * w[[ky, kx, ci, co]];
                            }
                        }
                    }
                    assert_eq!(out[[oy * ow + ox, co]], acc);
                }
            }
        }
    }
}
