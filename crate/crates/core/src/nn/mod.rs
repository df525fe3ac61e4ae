//! Minimal layer zoo with explicit backward passes.
//!
//! Layers hold their parameters but not their gradients; backward passes
//! accumulate into a caller-owned [`GradStore`] so several workers can
//! differentiate the same frozen model concurrently and reduce afterwards.

pub mod conv;
pub mod linear;
pub mod norm;
pub mod ops;

pub use conv::{Conv2d, ConvCache};
pub use linear::Linear;
pub use norm::{InstanceNorm, NormCache};

use ndarray::ArrayD;

use crate::Scalar;

/// Gradient slots aligned with a model's canonical parameter order.
#[derive(Debug, Clone)]
pub struct GradStore<F>(pub Vec<ArrayD<F>>);

impl<F: Scalar> GradStore<F> {
    pub fn zeros_like(shapes: &[Vec<usize>]) -> Self {
        GradStore(
            shapes
                .iter()
                .map(|s| ArrayD::zeros(s.as_slice()))
                .collect(),
        )
    }

    pub fn reset(&mut self) {
        for g in &mut self.0 {
            g.fill(F::zero());
        }
    }

    pub fn add_assign(&mut self, other: &GradStore<F>) {
        assert_eq!(self.0.len(), other.0.len());
        for (a, b) in self.0.iter_mut().zip(&other.0) {
            *a += b;
        }
    }

    pub fn scale(&mut self, factor: F) {
        for g in &mut self.0 {
            g.mapv_inplace(|v| v * factor);
        }
    }

    /// Sum of squared entries, for divergence checks and debugging.
    pub fn squared_norm(&self) -> F {
        self.0.iter().fold(F::zero(), |acc, g| {
            acc + g.iter().fold(F::zero(), |a, v| a + *v * *v)
        })
    }
}

/// SGD with classical momentum: `v = m*v + g; p -= lr*v`.
#[derive(Debug)]
pub struct SgdMomentum<F> {
    pub learning_rate: F,
    pub momentum: F,
    velocity: Vec<ArrayD<F>>,
}

impl<F: Scalar> SgdMomentum<F> {
    pub fn new(learning_rate: F, momentum: F, shapes: &[Vec<usize>]) -> Self {
        SgdMomentum {
            learning_rate,
            momentum,
            velocity: shapes
                .iter()
                .map(|s| ArrayD::zeros(s.as_slice()))
                .collect(),
        }
    }

    /// Applies one update. `params` yields mutable views in canonical order;
    /// `active` limits the update to a slot range (frozen slots keep their
    /// exact bit pattern since they are never touched).
    pub fn step<'a>(
        &mut self,
        params: impl Iterator<Item = ndarray::ArrayViewMutD<'a, F>>,
        grads: &GradStore<F>,
        active: impl Fn(usize) -> bool,
    ) where
        F: 'a,
    {
        let lr = self.learning_rate;
        let m = self.momentum;
        for (slot, mut p) in params.enumerate() {
            if !active(slot) {
                continue;
            }
            let g = &grads.0[slot];
            let v = &mut self.velocity[slot];
            azip_update(v, g, m);
            p.zip_mut_with(v, |pv, vv| *pv = *pv - lr * *vv);
        }
    }
}

fn azip_update<F: Scalar>(v: &mut ArrayD<F>, g: &ArrayD<F>, momentum: F) {
    v.zip_mut_with(g, |vv, gv| *vv = momentum * *vv + *gv);
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::ArrayViewMutD;

    #[test]
    fn sgd_momentum_matches_hand_rollout() {
        let shapes = vec![vec![2]];
        let mut p = ArrayD::from_shape_vec(vec![2], vec![1.0f64, -2.0]).unwrap();
        let mut opt = SgdMomentum::new(0.1, 0.9, &shapes);
        let mut grads = GradStore::zeros_like(&shapes);
        grads.0[0].fill(1.0);

        // step 1: v=1, p -= 0.1
        opt.step(
            std::iter::once::<ArrayViewMutD<f64>>(p.view_mut()),
            &grads,
            |_| true,
        );
        assert!((p[[0]] - 0.9).abs() < 1e-12);
        // step 2: v = 0.9 + 1 = 1.9, p -= 0.19
        opt.step(
            std::iter::once::<ArrayViewMutD<f64>>(p.view_mut()),
            &grads,
            |_| true,
        );
        assert!((p[[0]] - 0.71).abs() < 1e-12);
    }

    #[test]
    fn inactive_slots_stay_untouched() {
        let shapes = vec![vec![1], vec![1]];
        let mut a = ArrayD::from_elem(vec![1], 5.0f64);
        let mut b = ArrayD::from_elem(vec![1], 5.0f64);
        let mut opt = SgdMomentum::new(1.0, 0.0, &shapes);
        let mut grads = GradStore::zeros_like(&shapes);
        grads.0[0].fill(1.0);
        grads.0[1].fill(1.0);
        opt.step(
            vec![a.view_mut(), b.view_mut()].into_iter(),
            &grads,
            |slot| slot == 1,
        );
        assert_eq!(a[[0]], 5.0);
        assert_eq!(b[[0]], 4.0);
    }
}
