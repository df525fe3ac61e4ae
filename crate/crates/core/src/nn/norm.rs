use ndarray::{Array1, Array3, ArrayView3, ArrayViewMut1, Axis};

use crate::{cf, Scalar};

/// Per-channel instance normalization with learned affine parameters.
#[derive(Debug, Clone)]
pub struct InstanceNorm<F> {
    pub gamma: Array1<F>,
    pub beta: Array1<F>,
    pub eps: F,
}

#[derive(Debug)]
pub struct NormCache<F> {
    xhat: Array3<F>,
    inv_std: Array1<F>,
}

impl<F: Scalar> InstanceNorm<F> {
    pub fn new(channels: usize) -> Self {
        InstanceNorm {
            gamma: Array1::ones(channels),
            beta: Array1::zeros(channels),
            eps: cf(1e-5),
        }
    }

    pub fn from_parts(gamma: Array1<F>, beta: Array1<F>) -> Self {
        assert_eq!(gamma.len(), beta.len());
        InstanceNorm {
            gamma,
            beta,
            eps: cf(1e-5),
        }
    }

    pub fn channels(&self) -> usize {
        self.gamma.len()
    }

    pub fn forward(&self, x: ArrayView3<F>) -> (Array3<F>, NormCache<F>) {
        let (c, h, w) = x.dim();
        assert_eq!(c, self.gamma.len(), "norm channels");
        let n = cf::<F>((h * w) as f64);
        let mut xhat = x.to_owned();
        let mut inv_std = Array1::zeros(c);
        for (ci, mut plane) in xhat.axis_iter_mut(Axis(0)).enumerate() {
            let mean = plane.sum() / n;
            let mut var = F::zero();
            plane.mapv_inplace(|v| v - mean);
            for v in plane.iter() {
                var = var + *v * *v;
            }
            var = var / n;
            let is = F::one() / (var + self.eps).sqrt();
            plane.mapv_inplace(|v| v * is);
            inv_std[ci] = is;
        }
        let mut out = xhat.clone();
        for (ci, mut plane) in out.axis_iter_mut(Axis(0)).enumerate() {
            let (g, b) = (self.gamma[ci], self.beta[ci]);
            plane.mapv_inplace(|v| v * g + b);
        }
        (out, NormCache { xhat, inv_std })
    }

    pub fn backward(
        &self,
        cache: &NormCache<F>,
        dout: ArrayView3<F>,
        mut dgamma: ArrayViewMut1<F>,
        mut dbeta: ArrayViewMut1<F>,
    ) -> Array3<F> {
        let (c, h, w) = dout.dim();
        let n = cf::<F>((h * w) as f64);
        let mut dx = Array3::zeros((c, h, w));
        for ci in 0..c {
            let dy = dout.index_axis(Axis(0), ci);
            let xh = cache.xhat.index_axis(Axis(0), ci);
            let mut sum_dy = F::zero();
            let mut sum_dy_xh = F::zero();
            for (a, b) in dy.iter().zip(xh.iter()) {
                sum_dy = sum_dy + *a;
                sum_dy_xh = sum_dy_xh + *a * *b;
            }
            dgamma[ci] = dgamma[ci] + sum_dy_xh;
            dbeta[ci] = dbeta[ci] + sum_dy;

            let g = self.gamma[ci];
            let is = cache.inv_std[ci];
            let mean_dy = sum_dy / n;
            let mean_dy_xh = sum_dy_xh / n;
            let mut plane = dx.index_axis_mut(Axis(0), ci);
            ndarray::Zip::from(&mut plane).and(&dy).and(&xh).for_each(|d, &dyv, &xhv| {
                *d = g * is * (dyv - mean_dy - xhv * mean_dy_xh);
            });
        }
        dx
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn normalizes_each_channel() {
        let x = Array3::from_shape_fn((2, 3, 4), |(c, y, x)| (c * 10 + y * 4 + x) as f64);
        let norm = InstanceNorm::<f64>::new(2);
        let (out, _) = norm.forward(x.view());
        for ci in 0..2 {
            let plane = out.index_axis(Axis(0), ci);
            let mean = plane.sum() / 12.0;
            let var = plane.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / 12.0;
            assert!(mean.abs() < 1e-10);
            assert!((var - 1.0).abs() < 1e-4);
        }
    }

    #[test]
    fn gradients_match_finite_differences() {
        let x = Array3::from_shape_fn((2, 3, 3), |(c, y, xx)| {
            ((c * 9 + y * 3 + xx) as f64 * 0.63).sin()
        });
        let mut norm = InstanceNorm::<f64>::new(2);
        norm.gamma[0] = 1.3;
        norm.gamma[1] = 0.7;
        norm.beta[1] = 0.2;
        let weights = Array3::from_shape_fn((2, 3, 3), |(c, y, xx)| {
            0.2 + ((c + y * 2 + xx) as f64 * 0.9).cos()
        });
        let loss = |norm: &InstanceNorm<f64>, x: &Array3<f64>| -> f64 {
            (&norm.forward(x.view()).0 * &weights).sum()
        };

        let (_, cache) = norm.forward(x.view());
        let mut dg = Array1::zeros(2);
        let mut db = Array1::zeros(2);
        let dx = norm.backward(&cache, weights.view(), dg.view_mut(), db.view_mut());

        let h = 1e-6;
        let mut xp = x.clone();
        for idx in [[0, 0, 0], [1, 2, 2], [0, 1, 2], [1, 0, 1]] {
            let orig = xp[idx];
            xp[idx] = orig + h;
            let up = loss(&norm, &xp);
            xp[idx] = orig - h;
            let down = loss(&norm, &xp);
            xp[idx] = orig;
            let fd = (up - down) / (2.0 * h);
            assert!(
                (fd - dx[idx]).abs() < 1e-5 * (1.0 + fd.abs()),
                "dx {fd} vs {}",
                dx[idx]
            );
        }
        for ci in 0..2 {
            let orig = norm.gamma[ci];
            norm.gamma[ci] = orig + h;
            let up = loss(&norm, &x);
            norm.gamma[ci] = orig - h;
            let down = loss(&norm, &x);
            norm.gamma[ci] = orig;
            let fd = (up - down) / (2.0 * h);
            assert!((fd - dg[ci]).abs() < 1e-6 * (1.0 + fd.abs()));

            let orig = norm.beta[ci];
            norm.beta[ci] = orig + h;
            let up = loss(&norm, &x);
            norm.beta[ci] = orig - h;
            let down = loss(&norm, &x);
            norm.beta[ci] = orig;
            let fd = (up - down) / (2.0 * h);
            assert!((fd - db[ci]).abs() < 1e-6 * (1.0 + fd.abs()));
        }
    }
}
