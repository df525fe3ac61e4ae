//! Command line front end: training stages, evaluation, synthetic data
//! generation, and dataset statistics. Reports go to stdout as JSON, logs
//! to stderr.

use std::path::PathBuf;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};

use fewshot_core::episodic::SplitPools;
use fewshot_core::ingestion::synth::{generate_corpus, write_corpus, SceneSpec};
use fewshot_core::ingestion::{compute_stats, load_annotations};
use fewshot_core::pipeline::{
    evaluate, evaluate_rpn, finetune_on_proposals, load_embedding_encoder,
    load_feature_map_encoder, prepare_data, pretrain_classifier, save_embedding_encoder,
    save_feature_map_encoder, train_fewshot_classifier, train_rpn, EvalMode, EvalRequest,
    MetricsWriter, PreparedData, RunConfig,
};

#[derive(Parser)]
#[command(name = "fewshot", version, about = "Few-shot localization and classification")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct RunArgs {
    /// Run configuration TOML; every key has a documented default.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Line-delimited JSON metrics output.
    #[arg(long)]
    metrics: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Train the region proposal encoder on single-class episodes.
    TrainRpn {
        #[command(flatten)]
        run: RunArgs,
        /// Checkpoint output path.
        #[arg(long)]
        out: PathBuf,
    },
    /// Pretrain the classifier as a standard softmax model.
    PretrainCls {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long)]
        out: PathBuf,
        /// Train the plain RGB model (the no-localization baseline)
        /// instead of the mask-conditioned one.
        #[arg(long)]
        no_mask: bool,
    },
    /// Train the classifier episodically, starting from a pretrained
    /// checkpoint.
    TrainFewshot {
        #[command(flatten)]
        run: RunArgs,
        /// Pretrained classifier checkpoint.
        #[arg(long)]
        init: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Adapt the classifier tail to region proposals. The region encoder
    /// is read-only.
    Finetune {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long)]
        classifier: PathBuf,
        #[arg(long)]
        rpn: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate a classifier; prints an EvalReport as JSON.
    Eval {
        #[command(flatten)]
        run: RunArgs,
        /// none | support | oracle | propnet
        #[arg(long)]
        mode: String,
        #[arg(long)]
        classifier: Option<PathBuf>,
        /// Region proposal checkpoint; required for propnet mode and for
        /// --regions.
        #[arg(long)]
        rpn: Option<PathBuf>,
        /// Episodes per seed; defaults to the configured eval.episodes.
        #[arg(long)]
        episodes: Option<usize>,
        /// May repeat for a multi-seed report; defaults to the run seed.
        #[arg(long = "eval-seed")]
        eval_seeds: Vec<u64>,
        /// Which class split to evaluate on.
        #[arg(long, default_value = "test", value_parser = ["train", "val", "test"])]
        split: String,
        /// Report region proposal quality instead of classification.
        #[arg(long)]
        regions: bool,
        /// Test hook: condition propnet queries on their true masks.
        #[arg(long, hide = true)]
        inject_gt_query_masks: bool,
    },
    /// Generate a synthetic busy-scene corpus on disk.
    GenSynth {
        #[arg(long, default_value_t = 40)]
        classes: usize,
        #[arg(long, default_value_t = 25)]
        scenes_per_class: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Output directory; receives manifest.json and images/.
        #[arg(long)]
        out: PathBuf,
    },
    /// Print Table-style dataset statistics as JSON.
    Stats {
        #[arg(long)]
        manifest: PathBuf,
        /// Directory image paths are relative to; defaults to the
        /// manifest's directory.
        #[arg(long)]
        images_root: Option<PathBuf>,
    },
}

fn load_config(run: &RunArgs) -> anyhow::Result<RunConfig> {
    let mut cfg = match &run.config {
        Some(path) => RunConfig::from_path(path)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = run.seed {
        cfg.seed = seed;
    }
    Ok(cfg)
}

fn metrics_writer(run: &RunArgs) -> anyhow::Result<MetricsWriter> {
    Ok(match &run.metrics {
        Some(path) => MetricsWriter::to_path(path)?,
        None => MetricsWriter::disabled(),
    })
}

fn split_pools<'a>(data: &'a PreparedData, split: &str) -> &'a SplitPools {
    match split {
        "train" => &data.pools.train,
        "val" => &data.pools.val,
        _ => &data.pools.test,
    }
}

fn main() -> anyhow::Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();

    match cli.command {
        Command::TrainRpn { run, out } => {
            let cfg = load_config(&run)?;
            let data = prepare_data(&cfg)?;
            let mut metrics = metrics_writer(&run)?;
            let outcome = train_rpn(&data, &cfg, &mut metrics)?;
            save_feature_map_encoder(&outcome.encoder, &out)?;
            log::info!("saved {} (best validation IoU {:.4})", out.display(), outcome.best_val_iou);
        }
        Command::PretrainCls { run, out, no_mask } => {
            let cfg = load_config(&run)?;
            let data = prepare_data(&cfg)?;
            let mut metrics = metrics_writer(&run)?;
            let outcome = pretrain_classifier(&data, &cfg, !no_mask, &mut metrics)?;
            save_embedding_encoder(&outcome.encoder, &out)?;
            log::info!(
                "saved {} (final train accuracy {:.4})",
                out.display(),
                outcome.final_train_accuracy
            );
        }
        Command::TrainFewshot { run, init, out } => {
            let cfg = load_config(&run)?;
            let data = prepare_data(&cfg)?;
            let mut metrics = metrics_writer(&run)?;
            let encoder = load_embedding_encoder(&init)?;
            let outcome = train_fewshot_classifier(&data, &cfg, encoder, &mut metrics)?;
            save_embedding_encoder(&outcome.encoder, &out)?;
            log::info!(
                "saved {} (best validation accuracy {:.4})",
                out.display(),
                outcome.best_val_accuracy
            );
        }
        Command::Finetune { run, classifier, rpn, out } => {
            let cfg = load_config(&run)?;
            let data = prepare_data(&cfg)?;
            let mut metrics = metrics_writer(&run)?;
            let classifier = load_embedding_encoder(&classifier)?;
            let rpn = load_feature_map_encoder(&rpn)?;
            let outcome = finetune_on_proposals(&data, &cfg, classifier, &rpn, &mut metrics)?;
            save_embedding_encoder(&outcome.classifier, &out)?;
            log::info!(
                "saved {} (validation accuracy {:.4} -> {:.4})",
                out.display(),
                outcome.initial_val_accuracy,
                outcome.best_val_accuracy
            );
        }
        Command::Eval {
            run,
            mode,
            classifier,
            rpn,
            episodes,
            eval_seeds,
            split,
            regions,
            inject_gt_query_masks,
        } => {
            let cfg = load_config(&run)?;
            let data = prepare_data(&cfg)?;
            let pools = split_pools(&data, &split);
            let episodes = episodes.unwrap_or(cfg.eval.episodes);
            let seeds = if eval_seeds.is_empty() { vec![cfg.seed] } else { eval_seeds };
            let rpn = rpn.map(|p| load_feature_map_encoder(&p)).transpose()?;

            if regions {
                let rpn = rpn.context("--regions needs --rpn")?;
                let report = evaluate_rpn(
                    &rpn,
                    &data.dataset,
                    pools,
                    cfg.train.shots,
                    episodes,
                    seeds[0],
                    cfg.eval.binarize_threshold,
                )?;
                println!("{}", serde_json::to_string_pretty(&report)?);
                return Ok(());
            }

            let mode = EvalMode::parse(&mode)?;
            let classifier = classifier.context("eval needs --classifier")?;
            let classifier = load_embedding_encoder(&classifier)?;
            if mode == EvalMode::Propnet && rpn.is_none() {
                bail!("propnet mode needs --rpn");
            }
            let req = EvalRequest {
                mode,
                ways: cfg.train.ways,
                shots: cfg.train.shots,
                queries_per_episode: cfg.train.queries_per_episode,
                episodes,
                seeds,
                binarize_proposals: cfg.eval.binarize_proposals,
                binarize_threshold: cfg.eval.binarize_threshold,
                inject_gt_query_masks,
            };
            let report = evaluate(&classifier, rpn.as_ref(), &data.dataset, pools, &req)?;
            println!("{}", serde_json::to_string_pretty(&report)?);
        }
        Command::GenSynth { classes, scenes_per_class, seed, out } => {
            let mut spec = SceneSpec {
                num_classes: classes,
                ..SceneSpec::default()
            };
            spec.objects_max = spec.objects_max.min(classes);
            spec.objects_min = spec.objects_min.min(spec.objects_max);
            let raw = generate_corpus(&spec, scenes_per_class, seed)?;
            write_corpus(&raw, &out)?;
            log::info!(
                "wrote {} images and manifest.json to {}",
                raw.images.len(),
                out.display()
            );
        }
        Command::Stats { manifest, images_root } => {
            let root = match images_root {
                Some(r) => r,
                None => manifest
                    .parent()
                    .map(PathBuf::from)
                    .unwrap_or_else(|| PathBuf::from(".")),
            };
            let raw = load_annotations(&manifest, &root)?;
            let stats = compute_stats(&raw)?;
            println!("{}", serde_json::to_string_pretty(&stats)?);
        }
    }
    Ok(())
}
