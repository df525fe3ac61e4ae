//! Run configuration, data preparation, training stages, and evaluation.
//!
//! A run is configured by one TOML file; every field has a documented
//! default so an empty file is a valid configuration. The `FEWSHOT_DATA_ROOT`
//! environment variable, when set, re-roots relative data paths.

pub mod checkpoint;
pub mod eval;
pub mod metrics;
pub mod train;

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::augment::AugmentPolicy;
use crate::encoder::ChannelStats;
use crate::episodic::{
    build_pools, enforce_image_disjointness, make_class_splits, ClassSplits, SplitDataset,
    SplitPolicy,
};
use crate::error::{Error, Result};
use crate::ingestion::synth::SceneSpec;
use crate::ingestion::{filter_dataset, load_annotations, ClassId, Dataset, FilterConfig};

pub use checkpoint::{
    load_embedding_encoder, load_feature_map_encoder, save_embedding_encoder,
    save_feature_map_encoder, Checkpoint,
};
pub use eval::{evaluate, evaluate_rpn, EvalMode, EvalReport, EvalRequest, RpnReport};
pub use metrics::{MetricRecord, MetricsWriter};
pub use train::{
    finetune_on_proposals, pretrain_classifier, train_fewshot_classifier, train_rpn,
    FewshotOutcome, FinetuneOutcome, PretrainedClassifier, RpnOutcome,
};

/// Name of the environment variable that re-roots relative data paths.
pub const DATA_ROOT_ENV: &str = "FEWSHOT_DATA_ROOT";

#[derive(Debug, Clone, Serialize, Deserialize, Default)]
#[serde(default)]
pub struct RunConfig {
    pub seed: u64,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
    pub data: DataConfig,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    /// Widths of the classifier backbone blocks; the embedding dimension
    /// equals the last width.
    pub classifier_widths: Vec<usize>,
    /// Widths of the region-proposal backbone; the feature dimension
    /// equals the last width and the stride is 2^len.
    pub rpn_widths: Vec<usize>,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            classifier_widths: vec![32, 64, 128, 256],
            rpn_widths: vec![32, 64, 128],
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub episodes_per_epoch: usize,
    pub validation_episodes: usize,
    pub ways: usize,
    pub shots: usize,
    pub queries_per_episode: usize,
    pub pretrain_epochs: usize,
    pub pretrain_batches_per_epoch: usize,
    pub pretrain_batch_size: usize,
    pub learning_rate_pretrain: f64,
    pub learning_rate_episodic: f64,
    pub momentum: f64,
    /// Learning rate is multiplied by `lr_decay_factor` every this many
    /// epochs.
    pub lr_decay_every: usize,
    pub lr_decay_factor: f64,
    /// When true the region loss is taken on the similarity grid against
    /// a downsampled mask instead of at image resolution.
    pub rpn_loss_at_grid: bool,
    pub augment: AugmentConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 100,
            episodes_per_epoch: 500,
            validation_episodes: 100,
            ways: 5,
            shots: 5,
            queries_per_episode: 5,
            pretrain_epochs: 20,
            pretrain_batches_per_epoch: 150,
            pretrain_batch_size: 16,
            learning_rate_pretrain: 1e-2,
            learning_rate_episodic: 1e-3,
            momentum: 0.9,
            lr_decay_every: 40,
            lr_decay_factor: 0.1,
            rpn_loss_at_grid: false,
            augment: AugmentConfig::default(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct AugmentConfig {
    pub enabled: bool,
    pub horizontal_flip_prob: f64,
    pub rotation_degrees: f64,
    pub translation_fraction: f64,
    pub scale_min: f64,
    pub scale_max: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            enabled: true,
            horizontal_flip_prob: 0.5,
            rotation_degrees: 15.0,
            translation_fraction: 0.10,
            scale_min: 0.8,
            scale_max: 1.25,
        }
    }
}

impl AugmentConfig {
    /// Policy for one training stage. Stages get distinct seeds so their
    /// draw streams never collide. `None` when augmentation is off.
    pub fn policy(&self, run_seed: u64, stage: u64) -> Option<AugmentPolicy> {
        if !self.enabled {
            return None;
        }
        Some(AugmentPolicy {
            horizontal_flip_prob: self.horizontal_flip_prob,
            rotation_degrees: self.rotation_degrees,
            translation_fraction: self.translation_fraction,
            scale_min: self.scale_min,
            scale_max: self.scale_max,
            seed: run_seed.wrapping_mul(64).wrapping_add(stage),
        })
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    pub episodes: usize,
    /// Threshold for turning a soft proposal into a hard mask, used for
    /// region IoU and, when `binarize_proposals` is on, for conditioning.
    pub binarize_threshold: f64,
    /// Off by default: the classifier consumes soft proposal maps.
    pub binarize_proposals: bool,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            episodes: 1000,
            binarize_threshold: 0.5,
            binarize_proposals: false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SplitKind {
    #[serde(rename = "80-10-10")]
    EightyTenTen,
    #[serde(rename = "60-20-20")]
    SixtyTwentyTwenty,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct DataConfig {
    /// Path to a dataset manifest. Mutually exclusive with `synthetic`.
    pub manifest: Option<PathBuf>,
    /// Directory image paths are relative to; defaults to the manifest's
    /// directory.
    pub images_root: Option<PathBuf>,
    /// In-memory synthetic corpus instead of a manifest.
    pub synthetic: Option<SyntheticConfig>,
    pub min_area_fraction: f64,
    /// `None` disables the class-size filter (datasets with provided
    /// test splits).
    pub min_images_per_class: Option<usize>,
    pub split: SplitKind,
    /// When present, overrides `split` with a fixed test class list.
    pub test_classes: Option<Vec<ClassId>>,
    pub split_seed: u64,
    /// Remove test-split images from train and val pools.
    pub image_disjoint: bool,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            manifest: None,
            images_root: None,
            synthetic: None,
            min_area_fraction: 0.002,
            min_images_per_class: Some(200),
            split: SplitKind::EightyTenTen,
            test_classes: None,
            split_seed: 0,
            image_disjoint: false,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SyntheticConfig {
    #[serde(flatten)]
    pub scene: SceneSpec,
    pub scenes_per_class: usize,
    pub seed: u64,
}

impl RunConfig {
    pub fn from_path(path: &Path) -> Result<RunConfig> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        let cfg: RunConfig =
            toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.model.classifier_widths.is_empty() || self.model.rpn_widths.is_empty() {
            return Err(Error::Config("model widths must be non-empty".into()));
        }
        if self.train.ways < 2 {
            return Err(Error::Config("train.ways must be at least 2".into()));
        }
        if self.train.shots == 0 || self.train.queries_per_episode == 0 {
            return Err(Error::Config("shots and queries must be positive".into()));
        }
        if !(self.train.lr_decay_factor > 0.0 && self.train.lr_decay_factor <= 1.0) {
            return Err(Error::Config("lr_decay_factor must be in (0, 1]".into()));
        }
        if self.train.lr_decay_every == 0 {
            return Err(Error::Config("lr_decay_every must be positive".into()));
        }
        if self.data.manifest.is_some() && self.data.synthetic.is_some() {
            return Err(Error::Config("pick one of data.manifest and data.synthetic".into()));
        }
        if let Some(s) = &self.data.synthetic {
            s.scene.validate()?;
            if s.scenes_per_class == 0 {
                return Err(Error::Config("scenes_per_class must be positive".into()));
            }
        }
        Ok(())
    }
}

/// Dataset plus split pools and normalization statistics, everything a
/// training stage needs.
#[derive(Debug, Clone)]
pub struct PreparedData {
    pub dataset: Dataset,
    pub splits: ClassSplits,
    pub pools: SplitDataset,
    pub stats: ChannelStats,
}

fn resolve_data_path(path: &Path) -> PathBuf {
    match std::env::var_os(DATA_ROOT_ENV) {
        Some(root) if path.is_relative() => PathBuf::from(root).join(path),
        _ => path.to_path_buf(),
    }
}

/// Loads or generates the dataset, filters it, assembles samples, splits
/// classes, and computes train-split channel statistics.
pub fn prepare_data(cfg: &RunConfig) -> Result<PreparedData> {
    cfg.validate()?;
    let raw = match (&cfg.data.synthetic, &cfg.data.manifest) {
        (Some(synth), None) => {
            crate::ingestion::synth::generate_corpus(&synth.scene, synth.scenes_per_class, synth.seed)?
        }
        (None, Some(manifest)) => {
            let manifest = resolve_data_path(manifest);
            let images_root = match &cfg.data.images_root {
                Some(root) => resolve_data_path(root),
                None => manifest
                    .parent()
                    .map(Path::to_path_buf)
                    .unwrap_or_else(|| PathBuf::from(".")),
            };
            load_annotations(&manifest, &images_root)?
        }
        (None, None) => {
            return Err(Error::Config(
                "no data source: set data.manifest or data.synthetic".into(),
            ))
        }
        _ => unreachable!("validate rejects both"),
    };

    let filter = FilterConfig {
        min_area_fraction: cfg.data.min_area_fraction,
        min_images_per_class: cfg.data.min_images_per_class,
    };
    let (filtered, report) = filter_dataset(raw, &filter);
    if report.annotations_dropped_small > 0 || !report.classes_dropped.is_empty() {
        log::info!(
            "filter: dropped {} small annotations and {} classes",
            report.annotations_dropped_small,
            report.classes_dropped.len()
        );
    }
    let dataset = Dataset::assemble(filtered)?;

    let policy = match &cfg.data.test_classes {
        Some(test_classes) => SplitPolicy::ProvidedTest { test_classes: test_classes.clone() },
        None => match cfg.data.split {
            SplitKind::EightyTenTen => SplitPolicy::eighty_ten_ten(),
            SplitKind::SixtyTwentyTwenty => SplitPolicy::sixty_twenty_twenty(),
        },
    };
    let splits = make_class_splits(&dataset.class_ids(), &policy, cfg.data.split_seed)?;
    let mut pools = build_pools(&dataset, &splits);
    if cfg.data.image_disjoint {
        pools = enforce_image_disjointness(pools, &dataset);
    }

    let train_images: Vec<usize> = {
        let mut v: Vec<usize> = pools
            .train
            .samples_by_class
            .values()
            .flatten()
            .map(|&s| dataset.samples[s].image_index)
            .collect();
        v.sort_unstable();
        v.dedup();
        v
    };
    let stats = dataset.channel_stats(&train_images)?;
    Ok(PreparedData { dataset, splits, pools, stats })
}
