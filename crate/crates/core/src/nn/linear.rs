use ndarray::{Array1, Array2, ArrayView1, ArrayViewMut1, ArrayViewMut2};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::{cf, Scalar};

/// Fully connected layer, used only as the pretraining classification head.
#[derive(Debug, Clone)]
pub struct Linear<F> {
    pub weight: Array2<F>,
    pub bias: Array1<F>,
}

impl<F: Scalar> Linear<F> {
    pub fn he_init<R: Rng>(in_dim: usize, out_dim: usize, rng: &mut R) -> Self
    where
        StandardNormal: Distribution<F>,
    {
        let std = cf::<F>((2.0 / in_dim as f64).sqrt());
        let normal = StandardNormal;
        Linear {
            weight: Array2::from_shape_fn((out_dim, in_dim), |_| {
                let z: F = normal.sample(rng);
                z * std
            }),
            bias: Array1::zeros(out_dim),
        }
    }

    pub fn from_parts(weight: Array2<F>, bias: Array1<F>) -> Self {
        assert_eq!(weight.nrows(), bias.len());
        Linear { weight, bias }
    }

    pub fn forward(&self, x: ArrayView1<F>) -> Array1<F> {
        self.weight.dot(&x) + &self.bias
    }

    pub fn backward(
        &self,
        x: ArrayView1<F>,
        dout: ArrayView1<F>,
        mut dweight: ArrayViewMut2<F>,
        mut dbias: ArrayViewMut1<F>,
    ) -> Array1<F> {
        for (i, g) in dout.iter().enumerate() {
            dbias[i] = dbias[i] + *g;
            let mut row = dweight.row_mut(i);
            row.zip_mut_with(&x, |w, xv| *w = *w + *g * *xv);
        }
        self.weight.t().dot(&dout)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn forward_and_backward_match_hand_math() {
        let lin = Linear::from_parts(array![[1.0f64, 2.0], [0.5, -1.0]], array![0.1, 0.2]);
        let x = array![3.0, 4.0];
        let y = lin.forward(x.view());
        assert_eq!(y, array![11.1, -2.3]);

        let mut dw = Array2::zeros((2, 2));
        let mut db = Array1::zeros(2);
        let dout = array![1.0, -1.0];
        let dx = lin.backward(x.view(), dout.view(), dw.view_mut(), db.view_mut());
        assert_eq!(dx, array![0.5, 3.0]);
        assert_eq!(dw, array![[3.0, 4.0], [-3.0, -4.0]]);
        assert_eq!(db, array![1.0, -1.0]);
    }
}
