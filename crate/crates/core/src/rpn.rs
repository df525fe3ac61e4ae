//! Region proposal from support masks.
//!
//! Support feature maps are pooled under their (downsampled) masks into one
//! descriptor per shot, averaged into a class prototype, and the prototype is
//! matched against every query feature cell by cosine similarity. The
//! similarity grid, mapped to `[0, 1]` and upsampled, is the proposal mask.

use ndarray::{Array1, Array2, Array3, ArrayView1, ArrayView2, ArrayView3, Axis};

use crate::encoder::FeatureMapEncoder;
use crate::error::{Error, Result};
use crate::nn::ops::{bilinear_upsample, bilinear_upsample_backward};
use crate::{cf, Scalar};

/// Soft cell weights for a feature grid: each cell holds the mean mask value
/// over the pixels it covers (edge cells average only real pixels).
pub fn downsample_mask<F: Scalar>(mask: ArrayView2<F>, factor: usize) -> Array2<F> {
    let (h, w) = mask.dim();
    let (gh, gw) = (h.div_ceil(factor), w.div_ceil(factor));
    let mut out = Array2::zeros((gh, gw));
    for gy in 0..gh {
        let y0 = gy * factor;
        let y1 = (y0 + factor).min(h);
        for gx in 0..gw {
            let x0 = gx * factor;
            let x1 = (x0 + factor).min(w);
            let mut acc = F::zero();
            for y in y0..y1 {
                for x in x0..x1 {
                    acc = acc + mask[[y, x]];
                }
            }
            out[[gy, gx]] = acc / cf::<F>(((y1 - y0) * (x1 - x0)) as f64);
        }
    }
    out
}

/// Weighted mean descriptor over the feature grid (masked average pooling).
pub fn masked_average_pool<F: Scalar>(
    weights: ArrayView2<F>,
    fmap: ArrayView3<F>,
) -> Result<Array1<F>> {
    let (d, h, w) = fmap.dim();
    if weights.dim() != (h, w) {
        return Err(Error::Shape(format!(
            "mask weights {:?} vs feature grid {h}x{w}",
            weights.dim()
        )));
    }
    let total = weights.sum();
    if !(total > F::zero()) {
        return Err(Error::EmptyMask(
            "mask has no coverage on the feature grid".into(),
        ));
    }
    let mut out = Array1::zeros(d);
    for (di, plane) in fmap.axis_iter(Axis(0)).enumerate() {
        let mut acc = F::zero();
        ndarray::Zip::from(&plane).and(&weights).for_each(|f, w| {
            acc = acc + *f * *w;
        });
        out[di] = acc / total;
    }
    Ok(out)
}

/// Backward of [`masked_average_pool`] w.r.t. the feature map.
pub fn masked_average_pool_backward<F: Scalar>(
    weights: ArrayView2<F>,
    dvec: ArrayView1<F>,
) -> Array3<F> {
    let (h, w) = weights.dim();
    let d = dvec.len();
    let total = weights.sum();
    let mut dfmap = Array3::zeros((d, h, w));
    for di in 0..d {
        let g = dvec[di] / total;
        let mut plane = dfmap.index_axis_mut(Axis(0), di);
        ndarray::Zip::from(&mut plane).and(&weights).for_each(|o, w| {
            *o = g * *w;
        });
    }
    dfmap
}

/// Mean of per-shot descriptors. Dimensions are accumulated in value-sorted
/// order so any shot permutation produces the identical prototype.
pub fn class_prototype<F: Scalar>(descriptors: &[Array1<F>]) -> Result<Array1<F>> {
    if descriptors.is_empty() {
        return Err(Error::InvalidArgument("no support descriptors".into()));
    }
    let dim = descriptors[0].len();
    for d in descriptors {
        if d.len() != dim {
            return Err(Error::Shape(format!(
                "descriptor dims disagree: {} vs {dim}",
                d.len()
            )));
        }
    }
    let n = cf::<F>(descriptors.len() as f64);
    let mut out = Array1::zeros(dim);
    let mut column: Vec<F> = Vec::with_capacity(descriptors.len());
    for j in 0..dim {
        column.clear();
        column.extend(descriptors.iter().map(|d| d[j]));
        column.sort_by(|a, b| a.partial_cmp(b).expect("finite descriptor"));
        let mut acc = F::zero();
        for v in &column {
            acc = acc + *v;
        }
        out[j] = acc / n;
    }
    Ok(out)
}

/// Cosine similarity of the prototype against every feature cell, clamped to
/// `[-1, 1]`. Cells with zero norm score 0; a zero-norm prototype is an
/// error because its direction is undefined.
pub fn similarity_map<F: Scalar>(
    prototype: ArrayView1<F>,
    fmap: ArrayView3<F>,
) -> Result<Array2<F>> {
    let (d, h, w) = fmap.dim();
    if prototype.len() != d {
        return Err(Error::Shape(format!(
            "prototype dim {} vs feature dim {d}",
            prototype.len()
        )));
    }
    let pnorm = prototype.dot(&prototype).sqrt();
    if !(pnorm > F::zero()) {
        return Err(Error::ZeroPrototype(
            "support pooling produced a zero descriptor".into(),
        ));
    }
    let mut out = Array2::zeros((h, w));
    for y in 0..h {
        for x in 0..w {
            let mut dot = F::zero();
            let mut nf = F::zero();
            for di in 0..d {
                let f = fmap[[di, y, x]];
                dot = dot + f * prototype[di];
                nf = nf + f * f;
            }
            if nf > F::zero() {
                let s = dot / (pnorm * nf.sqrt());
                out[[y, x]] = s.max(-F::one()).min(F::one());
            }
        }
    }
    Ok(out)
}

/// Backward of [`similarity_map`]: gradients w.r.t. the prototype and the
/// feature map. Zero-norm cells contribute nothing.
pub fn similarity_map_backward<F: Scalar>(
    prototype: ArrayView1<F>,
    fmap: ArrayView3<F>,
    sim: ArrayView2<F>,
    dsim: ArrayView2<F>,
) -> (Array1<F>, Array3<F>) {
    let (d, h, w) = fmap.dim();
    let pnorm2 = prototype.dot(&prototype);
    let pnorm = pnorm2.sqrt();
    let mut dproto = Array1::zeros(d);
    let mut dfmap = Array3::zeros((d, h, w));
    for y in 0..h {
        for x in 0..w {
            let g = dsim[[y, x]];
            if g == F::zero() {
                continue;
            }
            let mut nf2 = F::zero();
            for di in 0..d {
                let f = fmap[[di, y, x]];
                nf2 = nf2 + f * f;
            }
            if !(nf2 > F::zero()) {
                continue;
            }
            let nf = nf2.sqrt();
            let s = sim[[y, x]];
            let inv = F::one() / (pnorm * nf);
            for di in 0..d {
                let f = fmap[[di, y, x]];
                let c = prototype[di];
                dfmap[[di, y, x]] = g * (c * inv - s * f / nf2);
                dproto[di] = dproto[di] + g * (f * inv - s * c / pnorm2);
            }
        }
    }
    (dproto, dfmap)
}

/// Affine map of similarities to `[0, 1]` followed by bilinear upsampling to
/// the requested image size.
pub fn proposal_from_similarity<F: Scalar>(
    sim: ArrayView2<F>,
    factor: usize,
    out_h: usize,
    out_w: usize,
) -> Array2<F> {
    let half = cf::<F>(0.5);
    let scores = sim.mapv(|s| (s + F::one()) * half);
    let mut up = bilinear_upsample(scores.view(), factor, out_h, out_w);
    up.mapv_inplace(|v| v.max(F::zero()).min(F::one()));
    up
}

/// Backward of [`proposal_from_similarity`] onto the similarity grid.
pub fn proposal_backward<F: Scalar>(
    dproposal: ArrayView2<F>,
    factor: usize,
    grid_h: usize,
    grid_w: usize,
) -> Array2<F> {
    let mut dsim = bilinear_upsample_backward(dproposal, factor, grid_h, grid_w);
    let half = cf::<F>(0.5);
    dsim.mapv_inplace(|v| v * half);
    dsim
}

/// One support example: image plus its full-resolution mask.
pub type SupportPair<'a, F> = (ArrayView3<'a, F>, ArrayView2<'a, F>);

/// Full proposal pipeline: pool support features under their masks, build
/// the class prototype, and score the query. The returned mask matches the
/// query image resolution, values in `[0, 1]`.
pub fn propose_region<F: Scalar>(
    encoder: &FeatureMapEncoder<F>,
    support: &[SupportPair<F>],
    query: ArrayView3<F>,
) -> Result<Array2<F>> {
    if support.is_empty() {
        return Err(Error::InvalidArgument("no support examples".into()));
    }
    let factor = encoder.factor();
    let mut descriptors = Vec::with_capacity(support.len());
    for (image, mask) in support {
        let (_, h, w) = image.dim();
        if mask.dim() != (h, w) {
            return Err(Error::Shape(format!(
                "support mask {:?} vs image {h}x{w}",
                mask.dim()
            )));
        }
        let fmap = encoder.feature_map(*image)?;
        let weights = downsample_mask(*mask, factor);
        descriptors.push(masked_average_pool(weights.view(), fmap.view())?);
    }
    let prototype = class_prototype(&descriptors)?;
    let (_, qh, qw) = query.dim();
    let qmap = encoder.feature_map(query)?;
    let sim = similarity_map(prototype.view(), qmap.view())?;
    Ok(proposal_from_similarity(sim.view(), factor, qh, qw))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn downsample_averages_cells_including_partial_edges() {
        let mask = Array2::from_shape_fn((5, 4), |(y, x)| if y < 2 && x < 2 { 1.0f64 } else { 0.0 });
        let w = downsample_mask(mask.view(), 2);
        assert_eq!(w.dim(), (3, 2));
        assert_eq!(w[[0, 0]], 1.0);
        assert_eq!(w[[0, 1]], 0.0);
        assert_eq!(w[[2, 0]], 0.0);
        let all = Array2::from_elem((5, 4), 1.0f64);
        let wa = downsample_mask(all.view(), 2);
        assert!(wa.iter().all(|v| (*v - 1.0).abs() < 1e-12));
    }

    #[test]
    fn map_is_weighted_mean_and_uniform_mask_is_plain_mean() {
        let fmap = Array3::from_shape_fn((2, 2, 2), |(d, y, x)| (d * 4 + y * 2 + x) as f64);
        let uniform = Array2::from_elem((2, 2), 0.5f64);
        let v = masked_average_pool(uniform.view(), fmap.view()).unwrap();
        assert!((v[0] - 1.5).abs() < 1e-12);
        assert!((v[1] - 5.5).abs() < 1e-12);

        let onehot = array![[1.0f64, 0.0], [0.0, 0.0]];
        let v = masked_average_pool(onehot.view(), fmap.view()).unwrap();
        assert_eq!(v[0], 0.0);
        assert_eq!(v[1], 4.0);
    }

    #[test]
    fn empty_mask_is_an_error() {
        let fmap = Array3::<f64>::ones((2, 3, 3));
        let zeros = Array2::<f64>::zeros((3, 3));
        match masked_average_pool(zeros.view(), fmap.view()) {
            Err(Error::EmptyMask(_)) => {}
            other => panic!("expected EmptyMask, got {other:?}"),
        }
    }

    #[test]
    fn prototype_is_shot_order_invariant() {
        let a = array![1.0f64, 2.0, -1.0];
        let b = array![0.5, -0.5, 3.0];
        let c = array![2.0, 0.0, 0.25];
        let p1 = class_prototype(&[a.clone(), b.clone(), c.clone()]).unwrap();
        let p2 = class_prototype(&[c, a, b]).unwrap();
        assert_eq!(p1, p2);
    }

    #[test]
    fn similarity_of_cell_equal_to_prototype_is_one() {
        let proto = array![3.0f64, 4.0];
        let mut fmap = Array3::zeros((2, 1, 3));
        fmap[[0, 0, 0]] = 3.0;
        fmap[[1, 0, 0]] = 4.0;
        fmap[[0, 0, 1]] = -3.0;
        fmap[[1, 0, 1]] = -4.0;
        // cell 2 stays zero
        let sim = similarity_map(proto.view(), fmap.view()).unwrap();
        assert!((sim[[0, 0]] - 1.0).abs() < 1e-12);
        assert!((sim[[0, 1]] + 1.0).abs() < 1e-12);
        assert_eq!(sim[[0, 2]], 0.0);
    }

    #[test]
    fn zero_prototype_is_an_error() {
        let proto = array![0.0f64, 0.0];
        let fmap = Array3::<f64>::ones((2, 2, 2));
        match similarity_map(proto.view(), fmap.view()) {
            Err(Error::ZeroPrototype(_)) => {}
            other => panic!("expected ZeroPrototype, got {other:?}"),
        }
    }

    #[test]
    fn proposal_values_cover_unit_interval_mapping() {
        let sim = array![[1.0f64, -1.0], [0.0, 0.5]];
        let p = proposal_from_similarity(sim.view(), 1, 2, 2);
        assert_eq!(p[[0, 0]], 1.0);
        assert_eq!(p[[0, 1]], 0.0);
        assert_eq!(p[[1, 0]], 0.5);
        assert_eq!(p[[1, 1]], 0.75);
    }

    #[test]
    fn similarity_backward_matches_finite_differences() {
        let proto = array![0.8f64, -0.4, 0.1];
        let fmap = Array3::from_shape_fn((3, 2, 2), |(d, y, x)| {
            0.3 + ((d * 5 + y * 2 + x) as f64 * 0.7).sin()
        });
        let weights = Array2::from_shape_fn((2, 2), |(y, x)| 0.5 + 0.1 * (y as f64 - x as f64));

        let loss = |proto: &Array1<f64>, fmap: &Array3<f64>| -> f64 {
            let sim = similarity_map(proto.view(), fmap.view()).unwrap();
            (&sim * &weights).sum()
        };

        let sim = similarity_map(proto.view(), fmap.view()).unwrap();
        let (dp, df) = similarity_map_backward(proto.view(), fmap.view(), sim.view(), weights.view());

        let h = 1e-7;
        for j in 0..3 {
            let mut pp = proto.clone();
            pp[j] += h;
            let mut pm = proto.clone();
            pm[j] -= h;
            let fd = (loss(&pp, &fmap) - loss(&pm, &fmap)) / (2.0 * h);
            assert!((fd - dp[j]).abs() < 1e-6, "proto {j}: {fd} vs {}", dp[j]);
        }
        for idx in [[0, 0, 0], [1, 1, 0], [2, 0, 1], [0, 1, 1]] {
            let mut fp = fmap.clone();
            fp[idx] += h;
            let mut fm = fmap.clone();
            fm[idx] -= h;
            let fd = (loss(&proto, &fp) - loss(&proto, &fm)) / (2.0 * h);
            let got = df[idx];
            assert!((fd - got).abs() < 1e-6, "fmap {idx:?}: {fd} vs {got}");
        }
    }

    #[test]
    fn map_backward_matches_finite_differences() {
        let weights = array![[0.25f64, 0.0], [0.5, 1.0]];
        let fmap = Array3::from_shape_fn((2, 2, 2), |(d, y, x)| ((d + y + x) as f64 * 0.9).cos());
        let probe = array![0.7f64, -0.3];
        let loss = |fmap: &Array3<f64>| -> f64 {
            masked_average_pool(weights.view(), fmap.view())
                .unwrap()
                .dot(&probe)
        };
        let df = masked_average_pool_backward(weights.view(), probe.view());
        let h = 1e-7;
        for idx in [[0, 0, 0], [1, 1, 1], [0, 1, 0]] {
            let mut fp = fmap.clone();
            fp[idx] += h;
            let mut fm = fmap.clone();
            fm[idx] -= h;
            let fd = (loss(&fp) - loss(&fm)) / (2.0 * h);
            assert!((fd - df[idx]).abs() < 1e-7);
        }
    }

    #[test]
    fn propose_region_runs_end_to_end() {
        use crate::encoder::{ChannelStats, EncoderConfig};
        let mut rng = crate::util::rng_stream(9, crate::util::StreamDomain::Init, 0);
        let cfg = EncoderConfig {
            input_channels: 3,
            widths: vec![4, 5, 6],
            stats: ChannelStats::identity(),
        };
        let enc = FeatureMapEncoder::<f64>::init(cfg, &mut rng).unwrap();
        let img = Array3::from_shape_fn((3, 24, 16), |(c, y, x)| {
            0.5 + 0.4 * ((c * 3 + y + 2 * x) as f64 * 0.21).sin()
        });
        let mask = Array2::from_shape_fn((24, 16), |(y, x)| ((y > 8 && x > 4) as u8) as f64);
        let query = Array3::from_shape_fn((3, 19, 21), |(c, y, x)| {
            0.5 + 0.4 * ((c * 7 + 3 * y + x) as f64 * 0.13).cos()
        });
        let support = [(img.view(), mask.view())];
        let proposal = propose_region(&enc, &support, query.view()).unwrap();
        assert_eq!(proposal.dim(), (19, 21));
        assert!(proposal.iter().all(|v| (0.0..=1.0).contains(v)));
    }
}
