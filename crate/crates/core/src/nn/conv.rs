use ndarray::linalg::general_mat_mul;
use ndarray::{s, Array1, Array2, Array3, ArrayView3, ArrayViewMut1, ArrayViewMut2};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::{cf, Scalar};

const KSIZE: usize = 3;
const PAD: usize = 1;

/// 3x3 same-padding convolution, stride 1.
///
/// The kernel is stored flattened as `(c_out, c_in * 9)` so the forward pass
/// is a single GEMM against an im2col patch matrix.
#[derive(Debug, Clone)]
pub struct Conv2d<F> {
    pub weight: Array2<F>,
    pub bias: Array1<F>,
    c_in: usize,
    c_out: usize,
}

/// Patch matrix kept from the forward pass; backward reuses it for the
/// weight gradient GEMM.
#[derive(Debug)]
pub struct ConvCache<F> {
    cols: Array2<F>,
    in_h: usize,
    in_w: usize,
}

impl<F: Scalar> Conv2d<F> {
    pub fn he_init<R: Rng>(c_in: usize, c_out: usize, rng: &mut R) -> Self
    where
        StandardNormal: Distribution<F>,
    {
        let std = cf::<F>((2.0 / (c_in * KSIZE * KSIZE) as f64).sqrt());
        let normal = StandardNormal;
        let weight = Array2::from_shape_fn((c_out, c_in * KSIZE * KSIZE), |_| {
            let z: F = normal.sample(rng);
            z * std
        });
        Conv2d {
            weight,
            bias: Array1::zeros(c_out),
            c_in,
            c_out,
        }
    }

    pub fn from_parts(weight: Array2<F>, bias: Array1<F>) -> Self {
        let c_out = weight.nrows();
        assert_eq!(weight.ncols() % (KSIZE * KSIZE), 0);
        assert_eq!(bias.len(), c_out);
        let c_in = weight.ncols() / (KSIZE * KSIZE);
        Conv2d {
            weight,
            bias,
            c_in,
            c_out,
        }
    }

    pub fn in_channels(&self) -> usize {
        self.c_in
    }

    pub fn out_channels(&self) -> usize {
        self.c_out
    }

    pub fn forward(&self, x: ArrayView3<F>) -> (Array3<F>, ConvCache<F>) {
        let (c, h, w) = x.dim();
        assert_eq!(c, self.c_in, "conv input channels");
        let cols = im2col(x);
        let out = self.apply_cols(&cols, h, w);
        (
            out,
            ConvCache {
                cols,
                in_h: h,
                in_w: w,
            },
        )
    }

    pub fn infer(&self, x: ArrayView3<F>) -> Array3<F> {
        self.forward(x).0
    }

    fn apply_cols(&self, cols: &Array2<F>, h: usize, w: usize) -> Array3<F> {
        let hw = h * w;
        let mut out2 = Array2::zeros((self.c_out, hw));
        general_mat_mul(F::one(), &self.weight, cols, F::zero(), &mut out2);
        for (mut row, b) in out2.outer_iter_mut().zip(self.bias.iter()) {
            row.mapv_inplace(|v| v + *b);
        }
        out2
            .into_shape_with_order((self.c_out, h, w))
            .expect("contiguous conv output")
    }

    /// Accumulates parameter gradients and optionally returns the input
    /// gradient (the first layer of a network can skip it).
    pub fn backward(
        &self,
        cache: &ConvCache<F>,
        dout: ArrayView3<F>,
        mut dweight: ArrayViewMut2<F>,
        mut dbias: ArrayViewMut1<F>,
        need_dinput: bool,
    ) -> Option<Array3<F>> {
        let (c, h, w) = dout.dim();
        assert_eq!(c, self.c_out);
        assert_eq!((h, w), (cache.in_h, cache.in_w));
        let hw = h * w;
        let dout2 = dout
            .to_shape((self.c_out, hw))
            .expect("contiguous conv grad");

        general_mat_mul(F::one(), &dout2, &cache.cols.t(), F::one(), &mut dweight);
        for (db, row) in dbias.iter_mut().zip(dout2.outer_iter()) {
            *db = *db + row.sum();
        }

        if !need_dinput {
            return None;
        }
        let mut dcols = Array2::zeros((self.c_in * KSIZE * KSIZE, hw));
        general_mat_mul(F::one(), &self.weight.t(), &dout2, F::zero(), &mut dcols);
        Some(col2im(&dcols, self.c_in, h, w))
    }
}

/// Unfolds 3x3 neighborhoods (zero padded) into a `(c*9, h*w)` matrix.
fn im2col<F: Scalar>(x: ArrayView3<F>) -> Array2<F> {
    let (c, h, w) = x.dim();
    let mut cols = Array2::zeros((c * KSIZE * KSIZE, h * w));
    for ci in 0..c {
        for ky in 0..KSIZE {
            for kx in 0..KSIZE {
                let row = (ci * KSIZE + ky) * KSIZE + kx;
                // Valid output x range for this kernel offset.
                let x0 = PAD.saturating_sub(kx);
                let x1 = (w + PAD - kx).min(w);
                if x0 >= x1 {
                    continue;
                }
                for y in 0..h {
                    let ys = y + ky;
                    if ys < PAD || ys >= h + PAD {
                        continue;
                    }
                    let ys = ys - PAD;
                    let dst_base = y * w;
                    let src = x.slice(s![ci, ys, x0 + kx - PAD..x1 + kx - PAD]);
                    cols.slice_mut(s![row, dst_base + x0..dst_base + x1])
                        .assign(&src);
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`]: folds patch gradients back onto the input grid.
fn col2im<F: Scalar>(dcols: &Array2<F>, c: usize, h: usize, w: usize) -> Array3<F> {
    let mut dx = Array3::zeros((c, h, w));
    for ci in 0..c {
        for ky in 0..KSIZE {
            for kx in 0..KSIZE {
                let row = (ci * KSIZE + ky) * KSIZE + kx;
                let x0 = PAD.saturating_sub(kx);
                let x1 = (w + PAD - kx).min(w);
                if x0 >= x1 {
                    continue;
                }
                for y in 0..h {
                    let ys = y + ky;
                    if ys < PAD || ys >= h + PAD {
                        continue;
                    }
                    let ys = ys - PAD;
                    let dst_base = y * w;
                    let mut acc = dx.slice_mut(s![ci, ys, x0 + kx - PAD..x1 + kx - PAD]);
                    let src = dcols.slice(s![row, dst_base + x0..dst_base + x1]);
                    acc.zip_mut_with(&src, |a, b| *a = *a + *b);
                }
            }
        }
    }
    dx
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array3;

    fn naive_conv(x: &Array3<f64>, conv: &Conv2d<f64>) -> Array3<f64> {
        let (c_in, h, w) = x.dim();
        let c_out = conv.out_channels();
        let mut out = Array3::zeros((c_out, h, w));
        for co in 0..c_out {
            for y in 0..h as isize {
                for xx in 0..w as isize {
                    let mut acc = conv.bias[co];
                    for ci in 0..c_in {
                        for ky in -1..=1isize {
                            for kx in -1..=1isize {
                                let (sy, sx) = (y + ky, xx + kx);
                                if sy < 0 || sy >= h as isize || sx < 0 || sx >= w as isize {
                                    continue;
                                }
                                let widx = (ci * 3 + (ky + 1) as usize) * 3 + (kx + 1) as usize;
                                acc += conv.weight[[co, widx]] * x[[ci, sy as usize, sx as usize]];
                            }
                        }
                    }
                    out[[co, y as usize, xx as usize]] = acc;
                }
            }
        }
        out
    }

    #[test]
    fn matches_naive_convolution() {
        let mut rng = crate::util::rng_stream(11, crate::util::StreamDomain::Init, 0);
        let conv = Conv2d::<f64>::he_init(2, 3, &mut rng);
        let x = Array3::from_shape_fn((2, 5, 7), |(c, y, x)| {
            ((c + 1) as f64 * 0.3).sin() + (y as f64 - x as f64) * 0.1
        });
        let (fast, _) = conv.forward(x.view());
        let slow = naive_conv(&x, &conv);
        for (a, b) in fast.iter().zip(slow.iter()) {
            assert!((a - b).abs() < 1e-12, "{a} vs {b}");
        }
    }

    #[test]
    fn gradients_match_finite_differences() {
        let mut rng = crate::util::rng_stream(12, crate::util::StreamDomain::Init, 0);
        let mut conv = Conv2d::<f64>::he_init(2, 2, &mut rng);
        let x = Array3::from_shape_fn((2, 4, 4), |(c, y, xx)| {
            0.05 * ((c * 16 + y * 4 + xx) as f64).cos()
        });

        // Scalar objective: weighted sum of outputs.
        let weights = Array3::from_shape_fn((2, 4, 4), |(c, y, xx)| {
            0.1 + ((c + 2 * y + 3 * xx) as f64 * 0.7).sin()
        });
        let loss = |conv: &Conv2d<f64>, x: &Array3<f64>| -> f64 {
            let (out, _) = conv.forward(x.view());
            (&out * &weights).sum()
        };

        let (_, cache) = conv.forward(x.view());
        let mut dw = Array2::zeros(conv.weight.dim());
        let mut db = Array1::zeros(conv.bias.len());
        let dx = conv
            .backward(&cache, weights.view(), dw.view_mut(), db.view_mut(), true)
            .unwrap();

        let h = 1e-6;
        for idx in [[0, 0], [1, 5], [0, 17], [1, 3]] {
            let orig = conv.weight[idx];
            conv.weight[idx] = orig + h;
            let up = loss(&conv, &x);
            conv.weight[idx] = orig - h;
            let down = loss(&conv, &x);
            conv.weight[idx] = orig;
            let fd = (up - down) / (2.0 * h);
            assert!((fd - dw[idx]).abs() < 1e-6 * (1.0 + fd.abs()));
        }
        for i in 0..2 {
            let orig = conv.bias[i];
            conv.bias[i] = orig + h;
            let up = loss(&conv, &x);
            conv.bias[i] = orig - h;
            let down = loss(&conv, &x);
            conv.bias[i] = orig;
            let fd = (up - down) / (2.0 * h);
            assert!((fd - db[i]).abs() < 1e-6 * (1.0 + fd.abs()));
        }
        let mut xp = x.clone();
        for idx in [[0, 0, 0], [1, 3, 3], [0, 2, 1]] {
            let orig = xp[idx];
            xp[idx] = orig + h;
            let up = loss(&conv, &xp);
            xp[idx] = orig - h;
            let down = loss(&conv, &xp);
            xp[idx] = orig;
            let fd = (up - down) / (2.0 * h);
            assert!((fd - dx[idx]).abs() < 1e-6 * (1.0 + fd.abs()));
        }
    }
}
