//! The four training stages.
//!
//! The classifier goes through three: plain softmax pretraining over the
//! training classes, episodic training with ground-truth masks, and a
//! final pass where its tail adapts to region proposals while everything
//! else stays frozen. The region proposal encoder trains separately on
//! single-class segmentation episodes.

use std::collections::BTreeMap;

use ndarray::{Array1, Array2, Array3, ArrayD, Ix1, Ix2};
use rand::seq::index;
use rand::Rng;

use crate::augment::{augment_pair, AugmentPolicy};
use crate::encoder::{
    EmbedCache, EmbeddingEncoder, EncoderConfig, FeatureMapEncoder, PARAMS_PER_BLOCK,
};
use crate::episodic::{sample_episode, sample_flat_batch, EpisodeConfig};
use crate::error::{Error, Result};
use crate::ingestion::{ClassId, Dataset, SampleId};
use crate::lovasz::lovasz_loss;
use crate::nn::{GradStore, Linear, SgdMomentum};
use crate::protonet::{
    class_centroids, nll, nll_grad_per_class, nll_grad_shared, predicted_class, score_query,
    QueryEmbedding,
};
use crate::rpn::{
    class_prototype, downsample_mask, masked_average_pool, masked_average_pool_backward,
    proposal_backward, proposal_from_similarity, similarity_map, similarity_map_backward,
};
use crate::util::{rng_stream, StreamDomain};

use super::eval::{evaluate, evaluate_rpn, EvalMode, EvalRequest};
use super::metrics::{MetricRecord, MetricsWriter};
use super::{PreparedData, RunConfig};

/// Stage tags keep initialization, augmentation, and episode streams of
/// the stages disjoint even though they share the run seed.
const STAGE_RPN: u64 = 1;
const STAGE_PRETRAIN_RGB: u64 = 2;
const STAGE_PRETRAIN_MASK: u64 = 3;
const STAGE_FEWSHOT: u64 = 4;
const STAGE_FINETUNE: u64 = 5;
/// Validation episode streams sit this far above the training streams.
const VAL_STREAM: u64 = 32;

fn stage_seed(run_seed: u64, stage: u64) -> u64 {
    run_seed.wrapping_mul(0x9e37_79b9_7f4a_7c15).wrapping_add(stage)
}

fn decayed_lr(cfg: &RunConfig, base: f64, epoch: usize) -> f32 {
    (base * cfg.train.lr_decay_factor.powi((epoch / cfg.train.lr_decay_every) as i32)) as f32
}

/// Loads a sample's image and mask, jointly augmented when a policy is
/// given.
fn fetch_pair(
    dataset: &Dataset,
    sample: SampleId,
    policy: Option<&AugmentPolicy>,
    draw: u64,
) -> Result<(Array3<f32>, Array2<f32>)> {
    let s = &dataset.samples[sample];
    let image = dataset.image_tensor::<f32>(s.image_index);
    let mask: Array2<f32> = s.mask.to_array();
    match policy {
        Some(p) => augment_pair(image.view(), mask.view(), p, draw),
        None => Ok((image, mask)),
    }
}

fn softmax_cross_entropy(logits: &Array1<f32>, target: usize) -> (f32, Array1<f32>) {
    let max = logits.fold(f32::NEG_INFINITY, |m, &v| m.max(v));
    let exps = logits.mapv(|v| (v - max).exp());
    let z = exps.sum();
    let p = exps / z;
    let loss = -p[target].max(1e-12).ln();
    let mut grad = p;
    grad[target] -= 1.0;
    (loss, grad)
}

fn argmax(v: &Array1<f32>) -> usize {
    let mut best = 0;
    for i in 1..v.len() {
        if v[i] > v[best] {
            best = i;
        }
    }
    best
}

fn val_request(mode: EvalMode, cfg: &RunConfig, seed: u64) -> EvalRequest {
    EvalRequest {
        mode,
        ways: cfg.train.ways,
        shots: cfg.train.shots,
        queries_per_episode: cfg.train.queries_per_episode,
        episodes: cfg.train.validation_episodes,
        seeds: vec![seed],
        binarize_proposals: cfg.eval.binarize_proposals,
        binarize_threshold: cfg.eval.binarize_threshold,
        inject_gt_query_masks: false,
    }
}

/// Stage A output: the pretrained backbone plus the softmax head and the
/// class order it was trained against.
pub struct PretrainedClassifier {
    pub encoder: EmbeddingEncoder<f32>,
    pub head: Linear<f32>,
    pub class_ids: Vec<ClassId>,
    pub final_train_accuracy: f64,
}

/// Standard softmax classification over the training classes. With
/// `with_mask` the encoder takes the ground-truth mask as a fourth
/// channel, starting from a widened RGB initialization so the mask path
/// begins at zero.
pub fn pretrain_classifier(
    data: &PreparedData,
    cfg: &RunConfig,
    with_mask: bool,
    metrics: &mut MetricsWriter,
) -> Result<PretrainedClassifier> {
    let stage = if with_mask { STAGE_PRETRAIN_MASK } else { STAGE_PRETRAIN_RGB };
    let mut rng = rng_stream(cfg.seed, StreamDomain::Init, stage);
    let econfig = EncoderConfig {
        input_channels: 3,
        widths: cfg.model.classifier_widths.clone(),
        stats: data.stats,
    };
    let rgb = EmbeddingEncoder::<f32>::init(econfig, &mut rng)?;
    let mut encoder = if with_mask { rgb.widened_to_mask_input()? } else { rgb };

    let class_ids = data.pools.train.classes();
    if class_ids.is_empty() {
        return Err(Error::Infeasible("empty training split".into()));
    }
    let class_index: BTreeMap<ClassId, usize> =
        class_ids.iter().enumerate().map(|(i, &c)| (c, i)).collect();
    let mut head = Linear::<f32>::he_init(encoder.embedding_dim(), class_ids.len(), &mut rng);

    let enc_shapes = encoder.param_shapes();
    let head_shapes = vec![
        vec![class_ids.len(), encoder.embedding_dim()],
        vec![class_ids.len()],
    ];
    let momentum = cfg.train.momentum as f32;
    let lr0 = decayed_lr(cfg, cfg.train.learning_rate_pretrain, 0);
    let mut opt_enc = SgdMomentum::new(lr0, momentum, &enc_shapes);
    let mut opt_head = SgdMomentum::new(lr0, momentum, &head_shapes);
    let mut enc_grads = GradStore::zeros_like(&enc_shapes);
    let mut head_grads = GradStore::zeros_like(&head_shapes);

    let policy = cfg.train.augment.policy(cfg.seed, stage);
    let flat_seed = stage_seed(cfg.seed, stage);
    let batch = cfg.train.pretrain_batch_size.max(1);
    let batches = cfg.train.pretrain_batches_per_epoch;
    let inv_batch = 1.0f32 / batch as f32;

    let mut final_accuracy = 0.0;
    for epoch in 0..cfg.train.pretrain_epochs {
        let lr = decayed_lr(cfg, cfg.train.learning_rate_pretrain, epoch);
        opt_enc.learning_rate = lr;
        opt_head.learning_rate = lr;
        let mut epoch_loss = 0.0f64;
        let mut correct = 0usize;
        let mut total = 0usize;
        for b in 0..batches {
            let batch_index = (epoch * batches + b) as u64;
            let ids = sample_flat_batch(&data.pools.train, batch, flat_seed, batch_index)?;
            enc_grads.reset();
            head_grads.reset();
            let mut batch_loss = 0.0f64;
            for (i, &id) in ids.iter().enumerate() {
                let draw = batch_index * batch as u64 + i as u64;
                let (img, mask) = fetch_pair(&data.dataset, id, policy.as_ref(), draw)?;
                let m = if with_mask { Some(mask.view()) } else { None };
                let (emb, cache) = encoder.embed_with_cache(img.view(), m)?;
                let logits = head.forward(emb.view());
                let target = class_index[&data.dataset.samples[id].class];
                let (loss, mut dlogits) = softmax_cross_entropy(&logits, target);
                batch_loss += loss as f64;
                if argmax(&logits) == target {
                    correct += 1;
                }
                total += 1;
                dlogits.mapv_inplace(|v| v * inv_batch);
                let (dw, db) = head_grads.0.split_at_mut(1);
                let demb = head.backward(
                    emb.view(),
                    dlogits.view(),
                    dw[0].view_mut().into_dimensionality::<Ix2>().expect("weight grad rank"),
                    db[0].view_mut().into_dimensionality::<Ix1>().expect("bias grad rank"),
                );
                encoder.backward(&cache, demb.view(), &mut enc_grads, 0);
            }
            if !batch_loss.is_finite() {
                return Err(Error::Training(format!(
                    "pretraining loss is not finite at epoch {epoch} batch {b}"
                )));
            }
            opt_enc.step(encoder.param_views_mut().into_iter(), &enc_grads, |_| true);
            opt_head.step(
                [head.weight.view_mut().into_dyn(), head.bias.view_mut().into_dyn()].into_iter(),
                &head_grads,
                |_| true,
            );
            epoch_loss += batch_loss;
        }
        final_accuracy = correct as f64 / total.max(1) as f64;
        metrics.log(&MetricRecord {
            epoch: epoch + 1,
            split: "pretrain",
            seed: cfg.seed,
            loss: Some(epoch_loss / total.max(1) as f64),
            accuracy: Some(final_accuracy),
            iou: None,
        });
    }

    Ok(PretrainedClassifier {
        encoder,
        head,
        class_ids,
        final_train_accuracy: final_accuracy,
    })
}

/// Stage B output.
pub struct FewshotOutcome {
    pub encoder: EmbeddingEncoder<f32>,
    /// Loss of the very first episode, before any update. Should sit near
    /// ln(ways) for a fresh or pretrained model.
    pub first_episode_loss: f64,
    pub best_val_accuracy: f64,
}

/// Episodic training against class centroids. Masks are ground truth on
/// both sides when the encoder takes them; a plain RGB encoder trains the
/// no-localization baseline with the same episode stream.
pub fn train_fewshot_classifier(
    data: &PreparedData,
    cfg: &RunConfig,
    mut encoder: EmbeddingEncoder<f32>,
    metrics: &mut MetricsWriter,
) -> Result<FewshotOutcome> {
    let with_mask = encoder.accepts_mask();
    let (ways, shots, queries) =
        (cfg.train.ways, cfg.train.shots, cfg.train.queries_per_episode);
    let dim = encoder.embedding_dim();

    let ep_cfg = EpisodeConfig {
        ways,
        shots,
        queries_per_episode: queries,
        seed: stage_seed(cfg.seed, STAGE_FEWSHOT),
    };
    ep_cfg.validate()?;
    let mut train_pools = data.pools.train.clone();
    let removed = train_pools.prune_small_classes(ep_cfg.max_samples_per_class());
    if !removed.is_empty() {
        log::warn!("fewshot training: {} classes too small for the episode shape", removed.len());
    }

    let policy = cfg.train.augment.policy(cfg.seed, STAGE_FEWSHOT);
    let val_mode = if with_mask { EvalMode::Oracle } else { EvalMode::NoLocalization };
    let val_req = val_request(val_mode, cfg, stage_seed(cfg.seed, STAGE_FEWSHOT + VAL_STREAM));

    let shapes = encoder.param_shapes();
    let momentum = cfg.train.momentum as f32;
    let mut opt = SgdMomentum::new(decayed_lr(cfg, cfg.train.learning_rate_episodic, 0), momentum, &shapes);
    let mut grads = GradStore::zeros_like(&shapes);

    let initial = evaluate(&encoder, None, &data.dataset, &data.pools.val, &val_req)?;
    metrics.log(&MetricRecord {
        epoch: 0,
        split: "val",
        seed: cfg.seed,
        loss: None,
        accuracy: Some(initial.accuracy),
        iou: None,
    });
    let mut best: (f64, Vec<ArrayD<f32>>) = (initial.accuracy, encoder.snapshot_params());

    let slots_per_episode = (ways * shots + queries) as u64;
    let inv_q = 1.0f32 / queries as f32;
    let mut first_episode_loss = f64::NAN;

    for epoch in 0..cfg.train.epochs {
        opt.learning_rate = decayed_lr(cfg, cfg.train.learning_rate_episodic, epoch);
        let mut epoch_loss = 0.0f64;
        let mut correct = 0usize;
        let mut total = 0usize;
        for e in 0..cfg.train.episodes_per_epoch {
            let global = (epoch * cfg.train.episodes_per_epoch + e) as u64;
            let episode = sample_episode(&train_pools, &ep_cfg, global)?;
            let draw_base = global * slots_per_episode;

            let mut sup_embeds: Vec<Array2<f32>> = Vec::with_capacity(ways);
            let mut sup_caches: Vec<Vec<EmbedCache<f32>>> = Vec::with_capacity(ways);
            for (k, shot_ids) in episode.support.iter().enumerate() {
                let mut rows = Array2::zeros((shots, dim));
                let mut caches = Vec::with_capacity(shots);
                for (s, &id) in shot_ids.iter().enumerate() {
                    let draw = draw_base + (k * shots + s) as u64;
                    let (img, mask) = fetch_pair(&data.dataset, id, policy.as_ref(), draw)?;
                    let m = if with_mask { Some(mask.view()) } else { None };
                    let (emb, cache) = encoder.embed_with_cache(img.view(), m)?;
                    rows.row_mut(s).assign(&emb);
                    caches.push(cache);
                }
                sup_embeds.push(rows);
                sup_caches.push(caches);
            }
            let centroids = class_centroids(&sup_embeds)?;

            grads.reset();
            let mut dcent_total: Array2<f32> = Array2::zeros(centroids.dim());
            let mut ep_loss = 0.0f64;
            for (qi, q) in episode.queries.iter().enumerate() {
                let draw = draw_base + (ways * shots + qi) as u64;
                let (img, mask) = fetch_pair(&data.dataset, q.sample, policy.as_ref(), draw)?;
                let m = if with_mask { Some(mask.view()) } else { None };
                let (emb, cache) = encoder.embed_with_cache(img.view(), m)?;
                let scores = score_query(QueryEmbedding::Shared(emb.view()), centroids.view())?;
                ep_loss += f64::from(nll(&scores, q.class_position)?);
                if predicted_class(&scores) == q.class_position {
                    correct += 1;
                }
                total += 1;
                let (dq, dcent) =
                    nll_grad_shared(&scores, q.class_position, emb.view(), centroids.view());
                let dq = dq.mapv(|v| v * inv_q);
                encoder.backward(&cache, dq.view(), &mut grads, 0);
                dcent_total += &dcent;
            }
            let ep_loss = ep_loss / queries as f64;
            if global == 0 {
                first_episode_loss = ep_loss;
                log::info!("first episode loss {ep_loss:.4} (chance would be {:.4})", (ways as f64).ln());
            }
            if !ep_loss.is_finite() {
                return Err(Error::Training(format!(
                    "episodic loss is not finite at epoch {epoch} episode {e}"
                )));
            }

            let inv_shot = inv_q / shots as f32;
            for (k, caches) in sup_caches.iter().enumerate() {
                let dembed = dcent_total.row(k).mapv(|v| v * inv_shot);
                for cache in caches {
                    encoder.backward(cache, dembed.view(), &mut grads, 0);
                }
            }
            opt.step(encoder.param_views_mut().into_iter(), &grads, |_| true);
            epoch_loss += ep_loss;
        }

        metrics.log(&MetricRecord {
            epoch: epoch + 1,
            split: "train",
            seed: cfg.seed,
            loss: Some(epoch_loss / cfg.train.episodes_per_epoch.max(1) as f64),
            accuracy: Some(correct as f64 / total.max(1) as f64),
            iou: None,
        });
        let report = evaluate(&encoder, None, &data.dataset, &data.pools.val, &val_req)?;
        metrics.log(&MetricRecord {
            epoch: epoch + 1,
            split: "val",
            seed: cfg.seed,
            loss: None,
            accuracy: Some(report.accuracy),
            iou: None,
        });
        if report.accuracy > best.0 {
            best = (report.accuracy, encoder.snapshot_params());
        }
    }

    encoder.restore_params(&best.1);
    Ok(FewshotOutcome {
        encoder,
        first_episode_loss,
        best_val_accuracy: best.0,
    })
}

pub struct RpnOutcome {
    pub encoder: FeatureMapEncoder<f32>,
    pub best_val_iou: f64,
}

/// Trains the region proposal encoder on single-class episodes: `shots`
/// support pairs build a prototype, the proposal for one held-out query is
/// scored against its mask. The best-validation-IoU parameters are
/// retained.
pub fn train_rpn(
    data: &PreparedData,
    cfg: &RunConfig,
    metrics: &mut MetricsWriter,
) -> Result<RpnOutcome> {
    let shots = cfg.train.shots;
    let mut rng = rng_stream(cfg.seed, StreamDomain::Init, STAGE_RPN);
    let econfig = EncoderConfig {
        input_channels: 3,
        widths: cfg.model.rpn_widths.clone(),
        stats: data.stats,
    };
    let mut encoder = FeatureMapEncoder::<f32>::init(econfig, &mut rng)?;
    let factor = encoder.factor();

    let mut train_pools = data.pools.train.clone();
    let removed = train_pools.prune_small_classes(shots + 1);
    if !removed.is_empty() {
        log::warn!("region training: {} classes too small for {shots}-shot episodes", removed.len());
    }
    let classes = train_pools.classes();
    if classes.is_empty() {
        return Err(Error::Infeasible(
            "no training class can fill a segmentation episode".into(),
        ));
    }

    let policy = cfg.train.augment.policy(cfg.seed, STAGE_RPN);
    let ep_seed = stage_seed(cfg.seed, STAGE_RPN);
    let val_seed = stage_seed(cfg.seed, STAGE_RPN + VAL_STREAM);

    let shapes = encoder.param_shapes();
    let momentum = cfg.train.momentum as f32;
    let mut opt = SgdMomentum::new(decayed_lr(cfg, cfg.train.learning_rate_episodic, 0), momentum, &shapes);
    let mut grads = GradStore::zeros_like(&shapes);

    let initial = evaluate_rpn(
        &encoder,
        &data.dataset,
        &data.pools.val,
        shots,
        cfg.train.validation_episodes,
        val_seed,
        cfg.eval.binarize_threshold,
    )?;
    metrics.log(&MetricRecord {
        epoch: 0,
        split: "val",
        seed: cfg.seed,
        loss: None,
        accuracy: None,
        iou: Some(initial.mean_iou),
    });
    let mut best: (f64, Vec<ArrayD<f32>>) = (initial.mean_iou, encoder.snapshot_params());

    for epoch in 0..cfg.train.epochs {
        opt.learning_rate = decayed_lr(cfg, cfg.train.learning_rate_episodic, epoch);
        let mut epoch_loss = 0.0f64;
        let mut counted = 0usize;
        for e in 0..cfg.train.episodes_per_epoch {
            let global = (epoch * cfg.train.episodes_per_epoch + e) as u64;
            let mut ep_rng = rng_stream(ep_seed, StreamDomain::Episode, global);
            let class = classes[ep_rng.gen_range(0..classes.len())];
            let pool = &train_pools.samples_by_class[&class];
            let picks = index::sample(&mut ep_rng, pool.len(), shots + 1);
            let ids: Vec<SampleId> = picks.iter().map(|i| pool[i]).collect();
            let draw_base = global * (shots as u64 + 1);

            let mut descriptors = Vec::with_capacity(shots);
            let mut sup_caches = Vec::with_capacity(shots);
            let mut sup_weights = Vec::with_capacity(shots);
            let mut degenerate = false;
            for (s, &id) in ids[..shots].iter().enumerate() {
                let (img, mask) = fetch_pair(&data.dataset, id, policy.as_ref(), draw_base + s as u64)?;
                let (fmap, cache) = encoder.feature_map_with_cache(img.view())?;
                let weights = downsample_mask(mask.view(), factor);
                match masked_average_pool(weights.view(), fmap.view()) {
                    Ok(d) => descriptors.push(d),
                    Err(Error::EmptyMask(_)) => {
                        degenerate = true;
                        break;
                    }
                    Err(e) => return Err(e),
                }
                sup_caches.push(cache);
                sup_weights.push(weights);
            }
            if degenerate {
                log::warn!("episode {global}: a support mask vanished, skipping");
                continue;
            }
            let prototype = class_prototype(&descriptors)?;

            let qid = ids[shots];
            let (qimg, qmask) =
                fetch_pair(&data.dataset, qid, policy.as_ref(), draw_base + shots as u64)?;
            let (qfmap, qcache) = encoder.feature_map_with_cache(qimg.view())?;
            let sim = match similarity_map(prototype.view(), qfmap.view()) {
                Ok(s) => s,
                Err(Error::ZeroPrototype(_)) => {
                    log::warn!("episode {global}: zero prototype, skipping");
                    continue;
                }
                Err(e) => return Err(e),
            };
            let (gh, gw) = sim.dim();
            let (h, w) = qmask.dim();

            grads.reset();
            let (loss, dsim, all_background) = if cfg.train.rpn_loss_at_grid {
                let target = downsample_mask(qmask.view(), factor);
                let labels: Vec<bool> = target.iter().map(|&v| v >= 0.5).collect();
                let preds: Vec<f32> = sim.iter().map(|&v| (v + 1.0) * 0.5).collect();
                let lv = lovasz_loss(&preds, &labels)?;
                let mut dsim = Array2::from_shape_vec((gh, gw), lv.grad).expect("grid grad shape");
                dsim.mapv_inplace(|v| v * 0.5);
                (lv.loss, dsim, lv.all_background)
            } else {
                let proposal = proposal_from_similarity(sim.view(), factor, h, w);
                let labels: Vec<bool> = qmask.iter().map(|&v| v >= 0.5).collect();
                let preds: Vec<f32> = proposal.iter().copied().collect();
                let lv = lovasz_loss(&preds, &labels)?;
                let dproposal =
                    Array2::from_shape_vec((h, w), lv.grad).expect("proposal grad shape");
                let dsim = proposal_backward(dproposal.view(), factor, gh, gw);
                (lv.loss, dsim, lv.all_background)
            };
            if all_background {
                log::debug!("episode {global}: query mask has no foreground at the loss scale");
            }
            if !loss.is_finite() {
                return Err(Error::Training(format!(
                    "region loss is not finite at epoch {epoch} episode {e}"
                )));
            }

            let (dproto, dqfmap) =
                similarity_map_backward(prototype.view(), qfmap.view(), sim.view(), dsim.view());
            encoder.backward(&qcache, dqfmap.view(), &mut grads);
            let ddesc = dproto.mapv(|v| v / shots as f32);
            for (cache, weights) in sup_caches.iter().zip(&sup_weights) {
                let dfmap = masked_average_pool_backward(weights.view(), ddesc.view());
                encoder.backward(cache, dfmap.view(), &mut grads);
            }
            opt.step(encoder.param_views_mut().into_iter(), &grads, |_| true);
            epoch_loss += f64::from(loss);
            counted += 1;
        }

        metrics.log(&MetricRecord {
            epoch: epoch + 1,
            split: "train",
            seed: cfg.seed,
            loss: Some(epoch_loss / counted.max(1) as f64),
            accuracy: None,
            iou: None,
        });
        let report = evaluate_rpn(
            &encoder,
            &data.dataset,
            &data.pools.val,
            shots,
            cfg.train.validation_episodes,
            val_seed,
            cfg.eval.binarize_threshold,
        )?;
        metrics.log(&MetricRecord {
            epoch: epoch + 1,
            split: "val",
            seed: cfg.seed,
            loss: None,
            accuracy: None,
            iou: Some(report.mean_iou),
        });
        if report.mean_iou > best.0 {
            best = (report.mean_iou, encoder.snapshot_params());
        }
    }

    encoder.restore_params(&best.1);
    Ok(RpnOutcome {
        encoder,
        best_val_iou: best.0,
    })
}

pub struct FinetuneOutcome {
    pub classifier: EmbeddingEncoder<f32>,
    /// Validation accuracy of the composition before any update.
    pub initial_val_accuracy: f64,
    pub best_val_accuracy: f64,
}

/// Adapts the tail of the classifier to proposal-conditioned queries.
/// The region proposal encoder is read-only here, and every classifier
/// parameter below the final block is excluded from both the backward
/// pass and the optimizer, so those bits cannot move. The returned model
/// is the best validation snapshot, which includes the starting point, so
/// fine-tuning never hands back something worse than its input.
pub fn finetune_on_proposals(
    data: &PreparedData,
    cfg: &RunConfig,
    mut classifier: EmbeddingEncoder<f32>,
    rpn: &FeatureMapEncoder<f32>,
    metrics: &mut MetricsWriter,
) -> Result<FinetuneOutcome> {
    if !classifier.accepts_mask() {
        return Err(Error::InvalidArgument(
            "fine-tuning needs the mask-conditioned classifier".into(),
        ));
    }
    let (ways, shots, queries) =
        (cfg.train.ways, cfg.train.shots, cfg.train.queries_per_episode);
    let dim = classifier.embedding_dim();
    let factor = rpn.factor();
    let lowest_block = cfg.model.classifier_widths.len() - 1;
    let first_active_slot = lowest_block * PARAMS_PER_BLOCK;

    let ep_cfg = EpisodeConfig {
        ways,
        shots,
        queries_per_episode: queries,
        seed: stage_seed(cfg.seed, STAGE_FINETUNE),
    };
    ep_cfg.validate()?;
    let mut train_pools = data.pools.train.clone();
    let removed = train_pools.prune_small_classes(ep_cfg.max_samples_per_class());
    if !removed.is_empty() {
        log::warn!("fine-tuning: {} classes too small for the episode shape", removed.len());
    }

    let policy = cfg.train.augment.policy(cfg.seed, STAGE_FINETUNE);
    let val_req = val_request(
        EvalMode::Propnet,
        cfg,
        stage_seed(cfg.seed, STAGE_FINETUNE + VAL_STREAM),
    );

    let shapes = classifier.param_shapes();
    let momentum = cfg.train.momentum as f32;
    let mut opt = SgdMomentum::new(decayed_lr(cfg, cfg.train.learning_rate_episodic, 0), momentum, &shapes);
    let mut grads = GradStore::zeros_like(&shapes);

    let initial =
        evaluate(&classifier, Some(rpn), &data.dataset, &data.pools.val, &val_req)?;
    metrics.log(&MetricRecord {
        epoch: 0,
        split: "val",
        seed: cfg.seed,
        loss: None,
        accuracy: Some(initial.accuracy),
        iou: None,
    });
    let mut best: (f64, Vec<ArrayD<f32>>) = (initial.accuracy, classifier.snapshot_params());

    let slots_per_episode = (ways * shots + queries) as u64;
    let inv_q = 1.0f32 / queries as f32;

    for epoch in 0..cfg.train.epochs {
        opt.learning_rate = decayed_lr(cfg, cfg.train.learning_rate_episodic, epoch);
        let mut epoch_loss = 0.0f64;
        let mut correct = 0usize;
        let mut total = 0usize;
        let mut counted = 0usize;
        'episodes: for e in 0..cfg.train.episodes_per_epoch {
            let global = (epoch * cfg.train.episodes_per_epoch + e) as u64;
            let episode = sample_episode(&train_pools, &ep_cfg, global)?;
            let draw_base = global * slots_per_episode;

            let mut sup_embeds: Vec<Array2<f32>> = Vec::with_capacity(ways);
            let mut sup_caches: Vec<Vec<EmbedCache<f32>>> = Vec::with_capacity(ways);
            let mut prototypes: Vec<Array1<f32>> = Vec::with_capacity(ways);
            for (k, shot_ids) in episode.support.iter().enumerate() {
                let mut rows = Array2::zeros((shots, dim));
                let mut caches = Vec::with_capacity(shots);
                let mut descriptors = Vec::with_capacity(shots);
                for (s, &id) in shot_ids.iter().enumerate() {
                    let draw = draw_base + (k * shots + s) as u64;
                    let (img, mask) = fetch_pair(&data.dataset, id, policy.as_ref(), draw)?;
                    let (emb, cache) = classifier.embed_with_cache(img.view(), Some(mask.view()))?;
                    rows.row_mut(s).assign(&emb);
                    caches.push(cache);
                    let fmap = rpn.feature_map(img.view())?;
                    let weights = downsample_mask(mask.view(), factor);
                    match masked_average_pool(weights.view(), fmap.view()) {
                        Ok(d) => descriptors.push(d),
                        Err(Error::EmptyMask(_)) => {
                            log::warn!("episode {global}: a support mask vanished, skipping");
                            continue 'episodes;
                        }
                        Err(e) => return Err(e),
                    }
                }
                sup_embeds.push(rows);
                sup_caches.push(caches);
                prototypes.push(class_prototype(&descriptors)?);
            }
            let centroids = class_centroids(&sup_embeds)?;

            grads.reset();
            let mut dcent_total: Array2<f32> = Array2::zeros(centroids.dim());
            let mut ep_loss = 0.0f64;
            for (qi, q) in episode.queries.iter().enumerate() {
                let draw = draw_base + (ways * shots + qi) as u64;
                let (qimg, _) = fetch_pair(&data.dataset, q.sample, policy.as_ref(), draw)?;
                let qfmap = rpn.feature_map(qimg.view())?;
                let (qh, qw) = (qimg.dim().1, qimg.dim().2);

                let mut rows = Array2::zeros((ways, dim));
                let mut caches = Vec::with_capacity(ways);
                for (k, proto) in prototypes.iter().enumerate() {
                    let sim = match similarity_map(proto.view(), qfmap.view()) {
                        Ok(s) => s,
                        Err(Error::ZeroPrototype(_)) => {
                            log::warn!("episode {global}: zero prototype, skipping");
                            continue 'episodes;
                        }
                        Err(e) => return Err(e),
                    };
                    let mut proposal = proposal_from_similarity(sim.view(), factor, qh, qw);
                    if cfg.eval.binarize_proposals {
                        let tau = cfg.eval.binarize_threshold as f32;
                        proposal.mapv_inplace(|v| if v >= tau { 1.0 } else { 0.0 });
                    }
                    let (emb, cache) =
                        classifier.embed_with_cache(qimg.view(), Some(proposal.view()))?;
                    rows.row_mut(k).assign(&emb);
                    caches.push(cache);
                }
                let scores =
                    score_query(QueryEmbedding::PerClass(rows.view()), centroids.view())?;
                ep_loss += f64::from(nll(&scores, q.class_position)?);
                if predicted_class(&scores) == q.class_position {
                    correct += 1;
                }
                total += 1;
                let (dqueries, dcent) =
                    nll_grad_per_class(&scores, q.class_position, rows.view(), centroids.view());
                for (k, cache) in caches.iter().enumerate() {
                    let dq = dqueries.row(k).mapv(|v| v * inv_q);
                    classifier.backward(cache, dq.view(), &mut grads, lowest_block);
                }
                dcent_total += &dcent;
            }
            let ep_loss = ep_loss / queries as f64;
            if !ep_loss.is_finite() {
                return Err(Error::Training(format!(
                    "fine-tuning loss is not finite at epoch {epoch} episode {e}"
                )));
            }

            let inv_shot = inv_q / shots as f32;
            for (k, caches) in sup_caches.iter().enumerate() {
                let dembed = dcent_total.row(k).mapv(|v| v * inv_shot);
                for cache in caches {
                    classifier.backward(cache, dembed.view(), &mut grads, lowest_block);
                }
            }
            opt.step(
                classifier.param_views_mut().into_iter(),
                &grads,
                |slot| slot >= first_active_slot,
            );
            epoch_loss += ep_loss;
            counted += 1;
        }

        metrics.log(&MetricRecord {
            epoch: epoch + 1,
            split: "train",
            seed: cfg.seed,
            loss: Some(epoch_loss / counted.max(1) as f64),
            accuracy: Some(correct as f64 / total.max(1) as f64),
            iou: None,
        });
        let report =
            evaluate(&classifier, Some(rpn), &data.dataset, &data.pools.val, &val_req)?;
        metrics.log(&MetricRecord {
            epoch: epoch + 1,
            split: "val",
            seed: cfg.seed,
            loss: None,
            accuracy: Some(report.accuracy),
            iou: None,
        });
        if report.accuracy > best.0 {
            best = (report.accuracy, classifier.snapshot_params());
        }
    }

    classifier.restore_params(&best.1);
    Ok(FinetuneOutcome {
        classifier,
        initial_val_accuracy: initial.accuracy,
        best_val_accuracy: best.0,
    })
}
