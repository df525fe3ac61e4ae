//! Lovász-Softmax loss for binary segmentation.
//!
//! The loss is the Lovász extension of the Jaccard loss evaluated at the
//! per-pixel prediction errors, which optimizes intersection-over-union
//! directly from soft predictions.

use crate::error::{Error, Result};
use crate::{cf, Scalar};

#[derive(Debug, Clone)]
pub struct LovaszLoss<F> {
    pub loss: F,
    /// Gradient w.r.t. each prediction, in input order.
    pub grad: Vec<F>,
    /// True when the target mask had no foreground; the loss then degrades
    /// to the mean prediction, pushing everything toward background.
    pub all_background: bool,
}

/// Jaccard-loss increments for errors sorted in descending order.
///
/// `sorted_fg[i]` says whether the i-th largest error sits on a foreground
/// pixel. Entry `i` is the increase of the Jaccard loss when the prefix of
/// mispredicted pixels grows from `i` to `i+1`; for a mask with at least one
/// foreground pixel every increment is non-negative and they sum to at most
/// one.
pub fn lovasz_grad<F: Scalar>(sorted_fg: &[bool]) -> Vec<F> {
    let n = sorted_fg.len();
    let gts = sorted_fg.iter().filter(|b| **b).count();
    let mut out = Vec::with_capacity(n);
    let mut cum_fg = 0usize;
    let mut cum_bg = 0usize;
    let mut prev = F::zero();
    for &fg in sorted_fg {
        if fg {
            cum_fg += 1;
        } else {
            cum_bg += 1;
        }
        let intersection = cf::<F>((gts - cum_fg) as f64);
        let union = cf::<F>((gts + cum_bg) as f64);
        let jaccard_loss = F::one() - intersection / union;
        out.push(jaccard_loss - prev);
        prev = jaccard_loss;
    }
    out
}

/// Loss and gradient for soft foreground predictions against a binary mask.
///
/// Errors `|y_i - p_i|` are sorted in descending order (ties keep input
/// order) and dotted with [`lovasz_grad`] increments. An all-background mask
/// is reported through the `all_background` flag instead of an error.
pub fn lovasz_loss<F: Scalar>(predictions: &[F], labels: &[bool]) -> Result<LovaszLoss<F>> {
    if predictions.len() != labels.len() {
        return Err(Error::Shape(format!(
            "{} predictions vs {} labels",
            predictions.len(),
            labels.len()
        )));
    }
    let n = predictions.len();
    if n == 0 {
        return Err(Error::InvalidArgument("empty prediction vector".into()));
    }
    for p in predictions {
        if !p.is_finite() || *p < F::zero() || *p > F::one() {
            return Err(Error::InvalidArgument(format!(
                "prediction {p} outside [0, 1]"
            )));
        }
    }

    if labels.iter().all(|l| !l) {
        let inv_n = F::one() / cf::<F>(n as f64);
        let mut mean = F::zero();
        for p in predictions {
            mean = mean + *p;
        }
        return Ok(LovaszLoss {
            loss: mean * inv_n,
            grad: vec![inv_n; n],
            all_background: true,
        });
    }

    let errors: Vec<F> = predictions
        .iter()
        .zip(labels)
        .map(|(p, &l)| if l { F::one() - *p } else { *p })
        .collect();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| {
        errors[b]
            .partial_cmp(&errors[a])
            .expect("finite errors")
            .then(a.cmp(&b))
    });

    let sorted_fg: Vec<bool> = order.iter().map(|&i| labels[i]).collect();
    let g = lovasz_grad::<F>(&sorted_fg);

    let mut loss = F::zero();
    let mut grad = vec![F::zero(); n];
    for (rank, &i) in order.iter().enumerate() {
        loss = loss + errors[i] * g[rank];
        // d|y - p|/dp is -1 on foreground, +1 on background
        grad[i] = if labels[i] { -g[rank] } else { g[rank] };
    }
    Ok(LovaszLoss {
        loss,
        grad,
        all_background: false,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn all_foreground_increments_are_uniform() {
        let g = lovasz_grad::<f64>(&[true; 5]);
        for v in &g {
            assert!((v - 0.2).abs() < 1e-12);
        }
    }

    #[test]
    fn increments_nonnegative_and_sum_to_final_jaccard() {
        let labels = [true, false, true, true, false, false, true];
        let g = lovasz_grad::<f64>(&labels);
        assert!(g.iter().all(|v| *v >= 0.0));
        let total: f64 = g.iter().sum();
        // prefix = everything mispredicted, so the Jaccard loss is 1
        assert!((total - 1.0).abs() < 1e-12);
    }

    #[test]
    fn perfect_prediction_has_zero_loss() {
        let labels = [true, false, true];
        let preds = [1.0f64, 0.0, 1.0];
        let out = lovasz_loss(&preds, &labels).unwrap();
        assert_eq!(out.loss, 0.0);
        assert!(!out.all_background);
    }

    #[test]
    fn fully_wrong_prediction_costs_one() {
        let labels = [true, false, true, false];
        let preds = [0.0f64, 1.0, 0.0, 1.0];
        let out = lovasz_loss(&preds, &labels).unwrap();
        assert!((out.loss - 1.0).abs() < 1e-12);
    }

    #[test]
    fn empty_mask_degrades_to_mean_prediction() {
        let labels = [false; 4];
        let preds = [0.5f64, 0.25, 0.75, 0.5];
        let out = lovasz_loss(&preds, &labels).unwrap();
        assert!(out.all_background);
        assert!((out.loss - 0.5).abs() < 1e-12);
        for g in &out.grad {
            assert!((g - 0.25).abs() < 1e-12);
        }
    }

    #[test]
    fn rejects_out_of_range_predictions() {
        assert!(lovasz_loss(&[1.5f64], &[true]).is_err());
        assert!(lovasz_loss(&[-0.1f64], &[false]).is_err());
        assert!(lovasz_loss(&[f64::NAN], &[true]).is_err());
    }

    #[test]
    fn gradient_matches_finite_differences_away_from_ties() {
        let labels = [true, false, true, false, false, true];
        let preds = [0.9f64, 0.35, 0.6, 0.15, 0.55, 0.25];
        let out = lovasz_loss(&preds, &labels).unwrap();
        let h = 1e-8;
        for i in 0..preds.len() {
            let mut up = preds;
            up[i] += h;
            let mut down = preds;
            down[i] -= h;
            let fd = (lovasz_loss(&up, &labels).unwrap().loss
                - lovasz_loss(&down, &labels).unwrap().loss)
                / (2.0 * h);
            assert!(
                (fd - out.grad[i]).abs() < 1e-6,
                "i={i}: fd {fd} vs {}",
                out.grad[i]
            );
        }
    }

    #[test]
    fn loss_is_permutation_consistent() {
        let labels = [true, false, true, false];
        let preds = [0.8f64, 0.3, 0.4, 0.6];
        let base = lovasz_loss(&preds, &labels).unwrap().loss;
        let perm = [2usize, 0, 3, 1];
        let p2: Vec<f64> = perm.iter().map(|&i| preds[i]).collect();
        let l2: Vec<bool> = perm.iter().map(|&i| labels[i]).collect();
        let other = lovasz_loss(&p2, &l2).unwrap().loss;
        assert!((base - other).abs() < 1e-15);
    }
}
