//! Stateless tensor ops used by the encoder and region proposal head.

use ndarray::{Array1, Array2, Array3, ArrayView1, ArrayView2, ArrayView3};

use crate::{cf, Scalar};

pub fn relu<F: Scalar>(x: &mut Array3<F>) {
    x.mapv_inplace(|v| if v > F::zero() { v } else { F::zero() });
}

/// `out` is the forward activation; zero entries block the gradient.
pub fn relu_backward<F: Scalar>(dout: ArrayView3<F>, out: ArrayView3<F>) -> Array3<F> {
    let mut dx = dout.to_owned();
    dx.zip_mut_with(&out, |d, o| {
        if *o <= F::zero() {
            *d = F::zero();
        }
    });
    dx
}

/// Index of the winning cell inside each 2x2 window, row-major 0..4.
/// Ties go to the first scanned position.
#[derive(Debug)]
pub struct PoolCache {
    argmax: Vec<u8>,
    in_dims: (usize, usize, usize),
}

pub fn max_pool2<F: Scalar>(x: ArrayView3<F>) -> (Array3<F>, PoolCache) {
    let (c, h, w) = x.dim();
    assert!(h % 2 == 0 && w % 2 == 0, "pool input dims must be even");
    let (ho, wo) = (h / 2, w / 2);
    let mut out = Array3::zeros((c, ho, wo));
    let mut argmax = vec![0u8; c * ho * wo];
    for ci in 0..c {
        for y in 0..ho {
            for xx in 0..wo {
                let mut best = x[[ci, 2 * y, 2 * xx]];
                let mut code = 0u8;
                for (k, (dy, dx)) in [(0, 0), (0, 1), (1, 0), (1, 1)].iter().enumerate() {
                    let v = x[[ci, 2 * y + dy, 2 * xx + dx]];
                    if v > best {
                        best = v;
                        code = k as u8;
                    }
                }
                out[[ci, y, xx]] = best;
                argmax[(ci * ho + y) * wo + xx] = code;
            }
        }
    }
    (
        out,
        PoolCache {
            argmax,
            in_dims: (c, h, w),
        },
    )
}

pub fn max_pool2_backward<F: Scalar>(cache: &PoolCache, dout: ArrayView3<F>) -> Array3<F> {
    let (c, h, w) = cache.in_dims;
    let (co, ho, wo) = dout.dim();
    assert_eq!((co, ho, wo), (c, h / 2, w / 2));
    let mut dx = Array3::zeros((c, h, w));
    for ci in 0..c {
        for y in 0..ho {
            for xx in 0..wo {
                let code = cache.argmax[(ci * ho + y) * wo + xx] as usize;
                let (dy, dxx) = (code / 2, code % 2);
                dx[[ci, 2 * y + dy, 2 * xx + dxx]] = dout[[ci, y, xx]];
            }
        }
    }
    dx
}

pub fn global_avg_pool<F: Scalar>(x: ArrayView3<F>) -> Array1<F> {
    let (c, h, w) = x.dim();
    let n = cf::<F>((h * w) as f64);
    let mut out = Array1::zeros(c);
    for ci in 0..c {
        out[ci] = x.index_axis(ndarray::Axis(0), ci).sum() / n;
    }
    out
}

pub fn global_avg_pool_backward<F: Scalar>(
    dout: ArrayView1<F>,
    dims: (usize, usize, usize),
) -> Array3<F> {
    let (c, h, w) = dims;
    assert_eq!(dout.len(), c);
    let n = cf::<F>((h * w) as f64);
    let mut dx = Array3::zeros((c, h, w));
    for ci in 0..c {
        let g = dout[ci] / n;
        dx.index_axis_mut(ndarray::Axis(0), ci).fill(g);
    }
    dx
}

fn reflect_index(t: usize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * n - 2;
    let m = t % period;
    if m < n {
        m
    } else {
        period - m
    }
}

/// Pads the bottom and right edges by mirror reflection (edge pixel not
/// repeated) so spatial dims become multiples of `factor`.
pub fn reflect_pad_to_multiple<F: Scalar>(x: ArrayView3<F>, factor: usize) -> Array3<F> {
    let (c, h, w) = x.dim();
    let hp = h.div_ceil(factor) * factor;
    let wp = w.div_ceil(factor) * factor;
    if hp == h && wp == w {
        return x.to_owned();
    }
    Array3::from_shape_fn((c, hp, wp), |(ci, y, xx)| {
        x[[ci, reflect_index(y, h), reflect_index(xx, w)]]
    })
}

/// Bilinear interpolation from a coarse `(h', w')` grid whose cells cover
/// `factor` pixels each, evaluated at the pixel centers of an `(out_h,
/// out_w)` image. Sample points follow the half-pixel convention, clamped at
/// the borders. `out_h <= h' * factor` (the tail covers edge padding).
pub fn bilinear_upsample<F: Scalar>(
    grid: ArrayView2<F>,
    factor: usize,
    out_h: usize,
    out_w: usize,
) -> Array2<F> {
    let (gh, gw) = grid.dim();
    assert!(out_h <= gh * factor && out_w <= gw * factor, "upsample target too large");
    let mut out = Array2::zeros((out_h, out_w));
    for y in 0..out_h {
        let (y0, y1, ty) = source_span(y, factor, gh);
        for xx in 0..out_w {
            let (x0, x1, tx) = source_span(xx, factor, gw);
            let a = grid[[y0, x0]] * (F::one() - ty) + grid[[y1, x0]] * ty;
            let b = grid[[y0, x1]] * (F::one() - ty) + grid[[y1, x1]] * ty;
            out[[y, xx]] = a * (F::one() - tx) + b * tx;
        }
    }
    out
}

/// Adjoint of [`bilinear_upsample`]: scatters output gradients back onto the
/// coarse grid.
pub fn bilinear_upsample_backward<F: Scalar>(
    dout: ArrayView2<F>,
    factor: usize,
    grid_h: usize,
    grid_w: usize,
) -> Array2<F> {
    let (out_h, out_w) = dout.dim();
    let mut dgrid = Array2::zeros((grid_h, grid_w));
    for y in 0..out_h {
        let (y0, y1, ty) = source_span::<F>(y, factor, grid_h);
        for xx in 0..out_w {
            let (x0, x1, tx) = source_span::<F>(xx, factor, grid_w);
            let g = dout[[y, xx]];
            dgrid[[y0, x0]] = dgrid[[y0, x0]] + g * (F::one() - ty) * (F::one() - tx);
            dgrid[[y1, x0]] = dgrid[[y1, x0]] + g * ty * (F::one() - tx);
            dgrid[[y0, x1]] = dgrid[[y0, x1]] + g * (F::one() - ty) * tx;
            dgrid[[y1, x1]] = dgrid[[y1, x1]] + g * ty * tx;
        }
    }
    dgrid
}

/// Maps output pixel `i` to bracketing grid cells and interpolation weight.
fn source_span<F: Scalar>(i: usize, factor: usize, n: usize) -> (usize, usize, F) {
    let src = (i as f64 + 0.5) / factor as f64 - 0.5;
    let src = src.max(0.0);
    let i0 = (src.floor() as usize).min(n - 1);
    let i1 = (i0 + 1).min(n - 1);
    let t = cf::<F>(src - i0 as f64);
    let t = if i1 == i0 { F::zero() } else { t };
    (i0, i1, t)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn pool_picks_max_and_routes_gradient() {
        let x = Array3::from_shape_vec(
            (1, 2, 4),
            vec![1.0f64, 5.0, 2.0, 2.0, 3.0, 4.0, 2.0, 1.0],
        )
        .unwrap();
        let (out, cache) = max_pool2(x.view());
        assert_eq!(out[[0, 0, 0]], 5.0);
        assert_eq!(out[[0, 0, 1]], 2.0);
        let dout = Array3::from_elem((1, 1, 2), 1.0);
        let dx = max_pool2_backward(&cache, dout.view());
        assert_eq!(dx[[0, 0, 1]], 1.0);
        // tie in the second window resolves to the first scanned cell
        assert_eq!(dx[[0, 0, 2]], 1.0);
        assert_eq!(dx.sum(), 2.0);
    }

    #[test]
    fn reflect_pad_mirrors_without_repeat() {
        let x = Array3::from_shape_vec((1, 1, 3), vec![1.0f64, 2.0, 3.0]).unwrap();
        let padded = reflect_pad_to_multiple(x.view(), 4);
        assert_eq!(padded.dim(), (1, 4, 4));
        assert_eq!(padded[[0, 0, 3]], 2.0);
        assert_eq!(padded[[0, 1, 0]], 1.0);
    }

    #[test]
    fn upsample_constant_grid_is_constant() {
        let grid = Array2::from_elem((2, 2), 0.7f64);
        let out = bilinear_upsample(grid.view(), 4, 7, 8);
        for v in out.iter() {
            assert!((v - 0.7).abs() < 1e-12);
        }
    }

    #[test]
    fn upsample_factor_one_is_identity() {
        let grid = array![[1.0f64, 2.0], [3.0, 4.0]];
        let out = bilinear_upsample(grid.view(), 1, 2, 2);
        assert_eq!(out, grid);
    }

    #[test]
    fn upsample_backward_is_adjoint() {
        // <U g, d> must equal <g, U* d> for the linear map U.
        let (gh, gw, f, oh, ow) = (3, 2, 4, 11, 8);
        let grid = Array2::from_shape_fn((gh, gw), |(y, x)| ((y * 7 + x * 3) as f64 * 0.31).sin());
        let dout = Array2::from_shape_fn((oh, ow), |(y, x)| ((y + 2 * x) as f64 * 0.17).cos());
        let up = bilinear_upsample(grid.view(), f, oh, ow);
        let back = bilinear_upsample_backward(dout.view(), f, gh, gw);
        let lhs = (&up * &dout).sum();
        let rhs = (&grid * &back).sum();
        assert!((lhs - rhs).abs() < 1e-10, "{lhs} vs {rhs}");
    }

    #[test]
    fn gap_backward_spreads_evenly() {
        let dout = Array1::from_vec(vec![2.0f64]);
        let dx = global_avg_pool_backward(dout.view(), (1, 2, 2));
        for v in dx.iter() {
            assert_eq!(*v, 0.5);
        }
    }
}
