//! Episodic evaluation under the four conditioning modes, plus region
//! proposal quality measurement.
//!
//! Modes differ only in where the query's mask channel comes from:
//! `none` uses a plain RGB model, `support` feeds an all-ones mask,
//! `oracle` the ground-truth mask, and `propnet` the region proposals,
//! one per candidate class, scored against that class's centroid.

use std::collections::HashMap;

use ndarray::{Array1, Array2, Array3};
use rand::seq::index;
use rand::Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::encoder::{EmbeddingEncoder, FeatureMapEncoder};
use crate::episodic::{sample_episode, Episode, EpisodeConfig, SplitPools};
use crate::error::{Error, Result};
use crate::ingestion::{Dataset, SampleId};
use crate::protonet::{class_centroids, predicted_class, score_query, QueryEmbedding};
use crate::rpn::{
    class_prototype, downsample_mask, masked_average_pool, proposal_from_similarity,
    propose_region, similarity_map,
};
use crate::util::{rng_stream, BitMask, StreamDomain};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EvalMode {
    NoLocalization,
    Support,
    Oracle,
    Propnet,
}

impl EvalMode {
    pub fn name(self) -> &'static str {
        match self {
            EvalMode::NoLocalization => "none",
            EvalMode::Support => "support",
            EvalMode::Oracle => "oracle",
            EvalMode::Propnet => "propnet",
        }
    }

    pub fn parse(s: &str) -> Result<EvalMode> {
        match s {
            "none" => Ok(EvalMode::NoLocalization),
            "support" => Ok(EvalMode::Support),
            "oracle" => Ok(EvalMode::Oracle),
            "propnet" => Ok(EvalMode::Propnet),
            other => Err(Error::InvalidArgument(format!(
                "unknown eval mode {other}, expected none|support|oracle|propnet"
            ))),
        }
    }
}

#[derive(Debug, Clone)]
pub struct EvalRequest {
    pub mode: EvalMode,
    pub ways: usize,
    pub shots: usize,
    pub queries_per_episode: usize,
    /// Episodes per seed.
    pub episodes: usize,
    pub seeds: Vec<u64>,
    pub binarize_proposals: bool,
    pub binarize_threshold: f64,
    /// Test hook: in propnet mode, condition every per-class query
    /// embedding on the query's ground-truth mask instead of the
    /// proposal. With this on, propnet must reproduce oracle exactly.
    pub inject_gt_query_masks: bool,
}

impl EvalRequest {
    pub fn new(mode: EvalMode, ways: usize, shots: usize, queries: usize, episodes: usize, seeds: Vec<u64>) -> Self {
        EvalRequest {
            mode,
            ways,
            shots,
            queries_per_episode: queries,
            episodes,
            seeds,
            binarize_proposals: false,
            binarize_threshold: 0.5,
            inject_gt_query_masks: false,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct SeedOutcome {
    pub seed: u64,
    pub correct: usize,
    pub total: usize,
    pub accuracy: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct EvalReport {
    pub mode: String,
    pub ways: usize,
    pub shots: usize,
    pub queries_per_episode: usize,
    pub episodes_per_seed: usize,
    pub per_seed: Vec<SeedOutcome>,
    pub correct: usize,
    pub total: usize,
    pub accuracy: f64,
    /// 1.96 * sqrt(p(1-p)/N) over all query predictions.
    pub ci95_half_width: f64,
}

fn gt_mask(dataset: &Dataset, sample: SampleId) -> Array2<f32> {
    dataset.samples[sample].mask.to_array()
}

fn embed_table(
    ids: &[SampleId],
    f: impl Fn(SampleId) -> Result<Array1<f32>> + Sync,
) -> Result<HashMap<SampleId, Array1<f32>>> {
    let pairs: Result<Vec<(SampleId, Array1<f32>)>> =
        ids.par_iter().map(|&id| Ok((id, f(id)?))).collect();
    Ok(pairs?.into_iter().collect())
}

fn conditioning(mut map: Array2<f32>, binarize: bool, tau: f32) -> Array2<f32> {
    if binarize {
        map.mapv_inplace(|v| if v >= tau { 1.0 } else { 0.0 });
    }
    map
}

/// Runs episodic classification evaluation. The episode stream is
/// deterministic per seed, so two modes evaluated with the same seed see
/// the same episodes.
pub fn evaluate(
    classifier: &EmbeddingEncoder<f32>,
    rpn: Option<&FeatureMapEncoder<f32>>,
    dataset: &Dataset,
    pools: &SplitPools,
    req: &EvalRequest,
) -> Result<EvalReport> {
    match req.mode {
        EvalMode::NoLocalization => {
            if classifier.accepts_mask() {
                return Err(Error::InvalidArgument(
                    "no-localization mode needs the plain RGB model".into(),
                ));
            }
        }
        _ => {
            if !classifier.accepts_mask() {
                return Err(Error::InvalidArgument(format!(
                    "{} mode needs the mask-conditioned model",
                    req.mode.name()
                )));
            }
        }
    }
    if req.mode == EvalMode::Propnet && rpn.is_none() {
        return Err(Error::InvalidArgument(
            "propnet mode needs a region proposal model".into(),
        ));
    }
    if req.seeds.is_empty() || req.episodes == 0 {
        return Err(Error::InvalidArgument("nothing to evaluate".into()));
    }

    let mut pools = pools.clone();
    let ep_probe = EpisodeConfig {
        ways: req.ways,
        shots: req.shots,
        queries_per_episode: req.queries_per_episode,
        seed: 0,
    };
    let removed = pools.prune_small_classes(ep_probe.max_samples_per_class());
    if !removed.is_empty() {
        log::warn!("eval: {} classes too small for the episode shape", removed.len());
    }

    let mut per_seed = Vec::with_capacity(req.seeds.len());
    for &seed in &req.seeds {
        let cfg = EpisodeConfig { seed, ..ep_probe };
        let episodes: Result<Vec<Episode>> = (0..req.episodes)
            .map(|i| sample_episode(&pools, &cfg, i as u64))
            .collect();
        let episodes = episodes?;
        let (correct, total) = score_episodes(classifier, rpn, dataset, &episodes, req)?;
        per_seed.push(SeedOutcome {
            seed,
            correct,
            total,
            accuracy: correct as f64 / total as f64,
        });
    }

    let correct: usize = per_seed.iter().map(|s| s.correct).sum();
    let total: usize = per_seed.iter().map(|s| s.total).sum();
    let p = correct as f64 / total as f64;
    Ok(EvalReport {
        mode: req.mode.name().to_string(),
        ways: req.ways,
        shots: req.shots,
        queries_per_episode: req.queries_per_episode,
        episodes_per_seed: req.episodes,
        per_seed,
        correct,
        total,
        accuracy: p,
        ci95_half_width: 1.96 * (p * (1.0 - p) / total as f64).sqrt(),
    })
}

fn score_episodes(
    classifier: &EmbeddingEncoder<f32>,
    rpn: Option<&FeatureMapEncoder<f32>>,
    dataset: &Dataset,
    episodes: &[Episode],
    req: &EvalRequest,
) -> Result<(usize, usize)> {
    let mut support_ids: Vec<SampleId> =
        episodes.iter().flat_map(|e| e.support.iter().flatten().copied()).collect();
    support_ids.sort_unstable();
    support_ids.dedup();
    let mut query_ids: Vec<SampleId> =
        episodes.iter().flat_map(|e| e.queries.iter().map(|q| q.sample)).collect();
    query_ids.sort_unstable();
    query_ids.dedup();

    // Support embeddings always use the ground-truth mask (or no mask for
    // the plain RGB model); they are shared across modes and episodes.
    let support_emb = embed_table(&support_ids, |id| {
        let img = dataset.image_tensor::<f32>(dataset.samples[id].image_index);
        if classifier.accepts_mask() {
            let mask = gt_mask(dataset, id);
            classifier.embed(img.view(), Some(mask.view()))
        } else {
            classifier.embed(img.view(), None)
        }
    })?;

    let query_emb: Option<HashMap<SampleId, Array1<f32>>> = match req.mode {
        EvalMode::NoLocalization => Some(embed_table(&query_ids, |id| {
            let img = dataset.image_tensor::<f32>(dataset.samples[id].image_index);
            classifier.embed(img.view(), None)
        })?),
        EvalMode::Support => Some(embed_table(&query_ids, |id| {
            let img = dataset.image_tensor::<f32>(dataset.samples[id].image_index);
            let s = &dataset.samples[id];
            let ones =
                Array2::ones((dataset.images[s.image_index].height, dataset.images[s.image_index].width));
            classifier.embed(img.view(), Some(ones.view()))
        })?),
        EvalMode::Oracle => Some(embed_table(&query_ids, |id| {
            let img = dataset.image_tensor::<f32>(dataset.samples[id].image_index);
            let mask = gt_mask(dataset, id);
            classifier.embed(img.view(), Some(mask.view()))
        })?),
        EvalMode::Propnet => None,
    };

    // Propnet reuses per-sample region descriptors and query feature maps.
    let (map_desc, query_fmap) = if req.mode == EvalMode::Propnet {
        let rpn = rpn.expect("checked above");
        let desc: Result<Vec<(SampleId, Array1<f32>)>> = support_ids
            .par_iter()
            .map(|&id| {
                let s = &dataset.samples[id];
                let img = dataset.image_tensor::<f32>(s.image_index);
                let fmap = rpn.feature_map(img.view())?;
                let weights = downsample_mask(gt_mask(dataset, id).view(), rpn.factor());
                Ok((id, masked_average_pool(weights.view(), fmap.view())?))
            })
            .collect();
        let fmaps: Result<Vec<(SampleId, Array3<f32>)>> = query_ids
            .par_iter()
            .map(|&id| {
                let img = dataset.image_tensor::<f32>(dataset.samples[id].image_index);
                Ok((id, rpn.feature_map(img.view())?))
            })
            .collect();
        (
            desc?.into_iter().collect::<HashMap<_, _>>(),
            fmaps?.into_iter().collect::<HashMap<_, _>>(),
        )
    } else {
        (HashMap::new(), HashMap::new())
    };

    let outcomes: Result<Vec<(usize, usize)>> = episodes
        .par_iter()
        .map(|episode| {
            let dim = classifier.embedding_dim();
            let per_class: Vec<Array2<f32>> = episode
                .support
                .iter()
                .map(|shots| {
                    let mut m = Array2::zeros((shots.len(), dim));
                    for (i, id) in shots.iter().enumerate() {
                        m.row_mut(i).assign(&support_emb[id]);
                    }
                    m
                })
                .collect();
            let centroids = class_centroids(&per_class)?;

            let mut correct = 0usize;
            for q in &episode.queries {
                let predicted = match req.mode {
                    EvalMode::Propnet => {
                        let rpn = rpn.expect("checked above");
                        let prototypes: Result<Vec<Array1<f32>>> = episode
                            .support
                            .iter()
                            .map(|shots| {
                                let descs: Vec<Array1<f32>> =
                                    shots.iter().map(|id| map_desc[id].clone()).collect();
                                class_prototype(&descs)
                            })
                            .collect();
                        let prototypes = prototypes?;
                        let s = &dataset.samples[q.sample];
                        let img = dataset.image_tensor::<f32>(s.image_index);
                        let (h, w) =
                            (dataset.images[s.image_index].height, dataset.images[s.image_index].width);
                        let fmap = &query_fmap[&q.sample];
                        let mut rows = Array2::zeros((episode.class_ids.len(), dim));
                        for (k, proto) in prototypes.iter().enumerate() {
                            let mask = if req.inject_gt_query_masks {
                                gt_mask(dataset, q.sample)
                            } else {
                                let sim = similarity_map(proto.view(), fmap.view())?;
                                conditioning(
                                    proposal_from_similarity(sim.view(), rpn.factor(), h, w),
                                    req.binarize_proposals,
                                    req.binarize_threshold as f32,
                                )
                            };
                            let emb = classifier.embed(img.view(), Some(mask.view()))?;
                            rows.row_mut(k).assign(&emb);
                        }
                        let scores = score_query(QueryEmbedding::PerClass(rows.view()), centroids.view())?;
                        predicted_class(&scores)
                    }
                    _ => {
                        let emb = &query_emb.as_ref().expect("table built for mode")[&q.sample];
                        let scores = score_query(QueryEmbedding::Shared(emb.view()), centroids.view())?;
                        predicted_class(&scores)
                    }
                };
                if predicted == q.class_position {
                    correct += 1;
                }
            }
            Ok((correct, episode.queries.len()))
        })
        .collect();

    let mut correct = 0usize;
    let mut total = 0usize;
    for (c, t) in outcomes? {
        correct += c;
        total += t;
    }
    Ok((correct, total))
}

#[derive(Debug, Clone, Serialize)]
pub struct RpnReport {
    pub episodes: usize,
    pub shots: usize,
    /// Mean IoU between the thresholded proposal and the query mask.
    pub mean_iou: f64,
    /// Fraction of episodes where the mean proposal value on true
    /// foreground exceeds the mean on background.
    pub fg_above_bg_fraction: f64,
}

/// Measures proposal quality on single-class episodes: `shots` support
/// samples condition a proposal for one held-out query of the same class.
pub fn evaluate_rpn(
    rpn: &FeatureMapEncoder<f32>,
    dataset: &Dataset,
    pools: &SplitPools,
    shots: usize,
    episodes: usize,
    seed: u64,
    threshold: f64,
) -> Result<RpnReport> {
    let mut pools = pools.clone();
    let removed = pools.prune_small_classes(shots + 1);
    if !removed.is_empty() {
        log::warn!("rpn eval: {} classes too small for {shots}-shot episodes", removed.len());
    }
    let classes = pools.classes();
    if classes.is_empty() {
        return Err(Error::Infeasible("no class can serve the episode shape".into()));
    }

    let outcomes: Result<Vec<(f64, bool)>> = (0..episodes as u64)
        .into_par_iter()
        .map(|idx| {
            let mut rng = rng_stream(seed, StreamDomain::Episode, idx);
            let class = classes[rng.gen_range(0..classes.len())];
            let pool = &pools.samples_by_class[&class];
            let picks = index::sample(&mut rng, pool.len(), shots + 1);
            let ids: Vec<SampleId> = picks.iter().map(|i| pool[i]).collect();
            let (support_ids, query_id) = (&ids[..shots], ids[shots]);

            let support: Vec<(Array3<f32>, Array2<f32>)> = support_ids
                .iter()
                .map(|&id| {
                    let s = &dataset.samples[id];
                    (dataset.image_tensor::<f32>(s.image_index), gt_mask(dataset, id))
                })
                .collect();
            let pairs: Vec<_> = support.iter().map(|(i, m)| (i.view(), m.view())).collect();
            let qs = &dataset.samples[query_id];
            let qimg = dataset.image_tensor::<f32>(qs.image_index);
            let proposal = propose_region(rpn, &pairs, qimg.view())?;

            let gt = &dataset.samples[query_id].mask;
            let hard = BitMask::from_fn(proposal.ncols(), proposal.nrows(), |x, y| {
                proposal[[y, x]] >= threshold as f32
            });
            let iou = hard.iou(gt)?;

            let mut fg_sum = 0.0f64;
            let mut bg_sum = 0.0f64;
            let mut fg_n = 0usize;
            let mut bg_n = 0usize;
            for y in 0..proposal.nrows() {
                for x in 0..proposal.ncols() {
                    if gt.get(x, y) {
                        fg_sum += proposal[[y, x]] as f64;
                        fg_n += 1;
                    } else {
                        bg_sum += proposal[[y, x]] as f64;
                        bg_n += 1;
                    }
                }
            }
            let fg_mean = fg_sum / fg_n.max(1) as f64;
            let bg_mean = bg_sum / bg_n.max(1) as f64;
            Ok((iou, fg_mean > bg_mean))
        })
        .collect();

    let outcomes = outcomes?;
    let n = outcomes.len();
    let mean_iou = outcomes.iter().map(|(i, _)| i).sum::<f64>() / n as f64;
    let fg_above = outcomes.iter().filter(|(_, b)| *b).count() as f64 / n as f64;
    Ok(RpnReport {
        episodes: n,
        shots,
        mean_iou,
        fg_above_bg_fraction: fg_above,
    })
}
