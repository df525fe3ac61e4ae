//! Prototype-based episode classification.
//!
//! Class centroids are means of support embeddings; queries are scored by
//! softmax over negated squared Euclidean distances.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};

use crate::error::{Error, Result};
use crate::{cf, Scalar};

/// Probability floor applied before taking the negative log.
const PROB_FLOOR: f64 = 1e-12;

/// Mean of each class's support embeddings, `(ways, dim)`.
///
/// Every dimension is accumulated in value-sorted order, so the result is
/// bit-identical under any permutation of the shots.
pub fn class_centroids<F: Scalar>(support: &[Array2<F>]) -> Result<Array2<F>> {
    if support.is_empty() {
        return Err(Error::InvalidArgument("no support classes".into()));
    }
    let dim = support[0].ncols();
    let mut centroids = Array2::zeros((support.len(), dim));
    let mut column: Vec<F> = Vec::new();
    for (k, rows) in support.iter().enumerate() {
        if rows.nrows() == 0 {
            return Err(Error::InvalidArgument(format!(
                "class {k} has no support embeddings"
            )));
        }
        if rows.ncols() != dim {
            return Err(Error::Shape(format!(
                "class {k} embedding dim {} != {dim}",
                rows.ncols()
            )));
        }
        let n = cf::<F>(rows.nrows() as f64);
        for j in 0..dim {
            column.clear();
            column.extend(rows.column(j).iter().copied());
            column.sort_by(|a, b| a.partial_cmp(b).expect("finite embedding"));
            let mut acc = F::zero();
            for v in &column {
                acc = acc + *v;
            }
            centroids[[k, j]] = acc / n;
        }
    }
    Ok(centroids)
}

/// How a query is represented against the centroids.
#[derive(Debug, Clone, Copy)]
pub enum QueryEmbedding<'a, F> {
    /// One embedding compared to every centroid.
    Shared(ArrayView1<'a, F>),
    /// Row `k` compared to centroid `k` (class-conditioned embeddings).
    PerClass(ArrayView2<'a, F>),
}

#[derive(Debug, Clone)]
pub struct ClassScores<F> {
    /// Squared Euclidean distances to each centroid.
    pub distances: Array1<F>,
    /// Softmax over negated distances; sums to one.
    pub probabilities: Array1<F>,
}

fn squared_distance<F: Scalar>(a: ArrayView1<F>, b: ArrayView1<F>) -> F {
    let mut acc = F::zero();
    for (x, y) in a.iter().zip(b.iter()) {
        let d = *x - *y;
        acc = acc + d * d;
    }
    acc
}

pub fn score_query<F: Scalar>(
    query: QueryEmbedding<F>,
    centroids: ArrayView2<F>,
) -> Result<ClassScores<F>> {
    let ways = centroids.nrows();
    let dim = centroids.ncols();
    if ways == 0 {
        return Err(Error::InvalidArgument("no centroids".into()));
    }
    let mut distances = Array1::zeros(ways);
    match query {
        QueryEmbedding::Shared(q) => {
            if q.len() != dim {
                return Err(Error::Shape(format!("query dim {} != {dim}", q.len())));
            }
            for (k, c) in centroids.axis_iter(Axis(0)).enumerate() {
                distances[k] = squared_distance(q, c);
            }
        }
        QueryEmbedding::PerClass(qs) => {
            if qs.dim() != (ways, dim) {
                return Err(Error::Shape(format!(
                    "per-class query {:?} != ({ways}, {dim})",
                    qs.dim()
                )));
            }
            for k in 0..ways {
                distances[k] = squared_distance(qs.row(k), centroids.row(k));
            }
        }
    }
    if distances.iter().any(|d| !d.is_finite()) {
        return Err(Error::InvalidArgument(
            "non-finite distance in query scoring".into(),
        ));
    }

    // softmax(-d), stabilized by the smallest distance
    let dmin = distances.iter().fold(F::infinity(), |m, d| m.min(*d));
    let mut probabilities = distances.mapv(|d| (-(d - dmin)).exp());
    let z = probabilities.sum();
    probabilities.mapv_inplace(|p| p / z);
    Ok(ClassScores {
        distances,
        probabilities,
    })
}

/// Argmax class; distance ties resolve to the lowest class index.
pub fn predicted_class<F: Scalar>(scores: &ClassScores<F>) -> usize {
    let mut best = 0;
    for k in 1..scores.distances.len() {
        if scores.distances[k] < scores.distances[best] {
            best = k;
        }
    }
    best
}

/// Negative log likelihood of the true class, floored at 1e-12.
pub fn nll<F: Scalar>(scores: &ClassScores<F>, true_class: usize) -> Result<F> {
    if true_class >= scores.probabilities.len() {
        return Err(Error::InvalidArgument(format!(
            "true class {true_class} out of range"
        )));
    }
    let p = scores.probabilities[true_class].max(cf(PROB_FLOOR));
    Ok(-p.ln())
}

/// Gradient of the NLL w.r.t. a shared query embedding and the centroids.
pub fn nll_grad_shared<F: Scalar>(
    scores: &ClassScores<F>,
    true_class: usize,
    query: ArrayView1<F>,
    centroids: ArrayView2<F>,
) -> (Array1<F>, Array2<F>) {
    let (ways, dim) = centroids.dim();
    let mut dquery = Array1::zeros(dim);
    let mut dcentroids = Array2::zeros((ways, dim));
    for k in 0..ways {
        // logits are negated distances, so dL/dd_k = indicator - p_k
        let coeff = if k == true_class { F::one() } else { F::zero() }
            - scores.probabilities[k];
        let two = cf::<F>(2.0);
        for j in 0..dim {
            let diff = query[j] - centroids[[k, j]];
            dquery[j] = dquery[j] + coeff * two * diff;
            dcentroids[[k, j]] = -coeff * two * diff;
        }
    }
    (dquery, dcentroids)
}

/// Gradient of the NLL for class-conditioned query embeddings: row `k` of
/// the result is the gradient for the embedding scored against centroid `k`.
pub fn nll_grad_per_class<F: Scalar>(
    scores: &ClassScores<F>,
    true_class: usize,
    queries: ArrayView2<F>,
    centroids: ArrayView2<F>,
) -> (Array2<F>, Array2<F>) {
    let (ways, dim) = centroids.dim();
    let mut dqueries = Array2::zeros((ways, dim));
    let mut dcentroids = Array2::zeros((ways, dim));
    let two = cf::<F>(2.0);
    for k in 0..ways {
        let coeff = if k == true_class { F::one() } else { F::zero() }
            - scores.probabilities[k];
        for j in 0..dim {
            let diff = queries[[k, j]] - centroids[[k, j]];
            dqueries[[k, j]] = coeff * two * diff;
            dcentroids[[k, j]] = -coeff * two * diff;
        }
    }
    (dqueries, dcentroids)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn centroids_are_means_and_shot_order_invariant() {
        let a = Array2::from_shape_vec((3, 2), vec![1.0f64, 0.0, 2.0, 1.0, 3.0, 2.0]).unwrap();
        let mut rows: Vec<_> = a.outer_iter().map(|r| r.to_owned()).collect();
        rows.reverse();
        let mut b = Array2::zeros((3, 2));
        for (i, r) in rows.iter().enumerate() {
            b.row_mut(i).assign(r);
        }
        let ca = class_centroids(&[a]).unwrap();
        let cb = class_centroids(&[b]).unwrap();
        assert_eq!(ca, cb);
        assert_eq!(ca[[0, 0]], 2.0);
        assert_eq!(ca[[0, 1]], 1.0);
    }

    #[test]
    fn probabilities_normalize_and_prefer_near_centroid() {
        let centroids = array![[0.0f64, 0.0], [10.0, 0.0], [0.0, 10.0]];
        let q = array![1.0, 0.5];
        let scores = score_query(QueryEmbedding::Shared(q.view()), centroids.view()).unwrap();
        assert!((scores.probabilities.sum() - 1.0).abs() < 1e-12);
        assert_eq!(predicted_class(&scores), 0);
    }

    #[test]
    fn distance_tie_goes_to_lowest_index() {
        let centroids = array![[1.0f64, 0.0], [-1.0, 0.0]];
        let q = array![0.0, 0.0];
        let scores = score_query(QueryEmbedding::Shared(q.view()), centroids.view()).unwrap();
        assert_eq!(scores.distances[0], scores.distances[1]);
        assert_eq!(predicted_class(&scores), 0);
    }

    #[test]
    fn nll_floor_keeps_loss_finite() {
        let centroids = array![[0.0f64], [1.0e4]];
        let q = array![0.0];
        let scores = score_query(QueryEmbedding::Shared(q.view()), centroids.view()).unwrap();
        let loss = nll(&scores, 1).unwrap();
        assert!(loss.is_finite());
        assert!((loss - (-(1e-12f64).ln())).abs() < 1e-6);
    }

    #[test]
    fn shared_gradients_match_finite_differences() {
        let centroids = array![[0.3f64, -0.2], [0.9, 0.4], [-0.5, 0.1]];
        let q = array![0.25, 0.05];
        let true_class = 1usize;

        let loss_at = |q: &Array1<f64>, c: &Array2<f64>| -> f64 {
            let s = score_query(QueryEmbedding::Shared(q.view()), c.view()).unwrap();
            nll(&s, true_class).unwrap()
        };

        let scores = score_query(QueryEmbedding::Shared(q.view()), centroids.view()).unwrap();
        let (dq, dc) = nll_grad_shared(&scores, true_class, q.view(), centroids.view());

        let h = 1e-7;
        for j in 0..2 {
            let mut qp = q.clone();
            qp[j] += h;
            let mut qm = q.clone();
            qm[j] -= h;
            let fd = (loss_at(&qp, &centroids) - loss_at(&qm, &centroids)) / (2.0 * h);
            assert!((fd - dq[j]).abs() < 1e-6 * (1.0 + fd.abs()));
        }
        for k in 0..3 {
            for j in 0..2 {
                let mut cp = centroids.clone();
                cp[[k, j]] += h;
                let mut cm = centroids.clone();
                cm[[k, j]] -= h;
                let fd = (loss_at(&q, &cp) - loss_at(&q, &cm)) / (2.0 * h);
                assert!((fd - dc[[k, j]]).abs() < 1e-6 * (1.0 + fd.abs()));
            }
        }
    }

    #[test]
    fn per_class_gradients_match_finite_differences() {
        let centroids = array![[0.3f64, -0.2], [0.9, 0.4]];
        let queries = array![[0.1f64, 0.0], [0.6, 0.6]];
        let true_class = 0usize;

        let loss_at = |qs: &Array2<f64>, c: &Array2<f64>| -> f64 {
            let s = score_query(QueryEmbedding::PerClass(qs.view()), c.view()).unwrap();
            nll(&s, true_class).unwrap()
        };

        let scores =
            score_query(QueryEmbedding::PerClass(queries.view()), centroids.view()).unwrap();
        let (dq, dc) = nll_grad_per_class(&scores, true_class, queries.view(), centroids.view());

        let h = 1e-7;
        for k in 0..2 {
            for j in 0..2 {
                let mut qp = queries.clone();
                qp[[k, j]] += h;
                let mut qm = queries.clone();
                qm[[k, j]] -= h;
                let fd = (loss_at(&qp, &centroids) - loss_at(&qm, &centroids)) / (2.0 * h);
                assert!((fd - dq[[k, j]]).abs() < 1e-6 * (1.0 + fd.abs()));

                let mut cp = centroids.clone();
                cp[[k, j]] += h;
                let mut cm = centroids.clone();
                cm[[k, j]] -= h;
                let fd = (loss_at(&queries, &cp) - loss_at(&queries, &cm)) / (2.0 * h);
                assert!((fd - dc[[k, j]]).abs() < 1e-6 * (1.0 + fd.abs()));
            }
        }
    }
}
