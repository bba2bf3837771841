//! Training orchestration: corpus construction, the epoch loop, periodic
//! evaluation under both protocols, run records, and checkpoints.

use std::path::Path;
use std::time::Instant;

use anyhow::Context;
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use viplab_core::bench::train::{train_step, LossBreakdown};
use viplab_core::bench::{
    generate_category_space, generate_corpus, protocol, split_seeds, CategorySpace, Detection,
    SyntheticScene,
};
use viplab_core::metrics::iisr;
use viplab_core::model::{FusionSettings, ToyDetector};
use viplab_core::nn::{Adam, ParamStore};

use crate::config::ExperimentConfig;

/// Metrics captured at one evaluation point.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub mean_losses: LossBreakdown,
    pub visual_g_map: f64,
    pub visual_i_map: f64,
    pub iisr: Option<f64>,
    pub iisr_negative_inter: bool,
}

/// Everything persisted about one run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub config_hash: String,
    pub seed: u64,
    pub metrics: Vec<EpochMetrics>,
    pub wall_clock_secs: f64,
    pub checkpoint_path: Option<String>,
}

impl RunRecord {
    pub fn final_metrics(&self) -> &EpochMetrics {
        self.metrics.last().expect("at least one evaluation")
    }
}

/// A trained model with everything needed to evaluate it.
pub struct Trained {
    pub config: ExperimentConfig,
    pub model: ToyDetector,
    pub store: ParamStore,
    pub space: CategorySpace,
}

/// Serialized checkpoint contents.
#[derive(Serialize, Deserialize)]
struct CheckpointFile {
    config: ExperimentConfig,
    model: ToyDetector,
    store: ParamStore,
}

pub fn save_checkpoint(trained: &Trained, path: &Path) -> anyhow::Result<()> {
    let file = CheckpointFile {
        config: trained.config.clone(),
        model: trained.model.clone(),
        store: trained.store.clone(),
    };
    let json = serde_json::to_string(&file)?;
    std::fs::write(path, json).with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> anyhow::Result<Trained> {
    let text = std::fs::read_to_string(path)
        .with_context(|| format!("reading checkpoint {}", path.display()))?;
    let file: CheckpointFile = serde_json::from_str(&text).context("invalid checkpoint")?;
    let space = generate_category_space(&file.config.space_config())?;
    Ok(Trained {
        config: file.config,
        model: file.model,
        store: file.store,
        space,
    })
}

/// Build the three scene splits of a config.
pub fn build_corpora(
    config: &ExperimentConfig,
    space: &CategorySpace,
) -> anyhow::Result<(Vec<SyntheticScene>, Vec<SyntheticScene>)> {
    let scene_cfg = config.scene_config();
    let train = generate_corpus(
        space,
        &scene_cfg,
        &split_seeds(config.experiment.seed, "train", config.corpus.train_scenes),
    )?;
    let eval = generate_corpus(
        space,
        &scene_cfg,
        &split_seeds(config.experiment.seed, "eval", config.corpus.eval_scenes),
    )?;
    Ok((train, eval))
}

/// Evaluate a model state under both protocols plus the embedding ratio.
pub fn evaluate_state(
    config: &ExperimentConfig,
    model: &ToyDetector,
    store: &ParamStore,
    space: &CategorySpace,
    train_scenes: &[SyntheticScene],
    eval_scenes: &[SyntheticScene],
    fusion: FusionSettings,
    epoch: usize,
    mean_losses: LossBreakdown,
) -> anyhow::Result<EpochMetrics> {
    let categories: Vec<u32> = (0..space.k() as u32).collect();
    let bank = protocol::visual_g_prompts(
        model,
        store,
        &categories,
        train_scenes,
        config.corpus.support_per_class,
        config.experiment.seed ^ 0x5eed,
    )?;
    let (g_report, _) = protocol::evaluate_bank(model, store, eval_scenes, &bank, fusion)?;
    let i_report = protocol::evaluate_visual_i(
        model,
        store,
        eval_scenes,
        config.experiment.seed ^ 0x1111,
        fusion,
    )?;
    let prompts = protocol::collect_labeled_prompts(model, store, eval_scenes, 8)?;
    let (ratio, negative) = match iisr(&prompts) {
        Ok(out) => (Some(out.value), out.negative_inter),
        Err(_) => (None, false),
    };
    Ok(EpochMetrics {
        epoch,
        mean_losses,
        visual_g_map: g_report.map,
        visual_i_map: i_report.map,
        iisr: ratio,
        iisr_negative_inter: negative,
    })
}

/// Train a model from a config. Deterministic given the config (the seed
/// lives inside it). Returns the record and the trained state.
pub fn run_training(config: &ExperimentConfig) -> anyhow::Result<(RunRecord, Trained)> {
    config.validate()?;
    let start = Instant::now();
    let space = generate_category_space(&config.space_config())?;
    let (train_scenes, eval_scenes) = build_corpora(config, &space)?;

    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(config.experiment.seed.wrapping_add(0xABCD));
    let model = ToyDetector::new(&mut store, &mut rng, config.model_config());
    let settings = config.train_settings()?;
    let fusion = settings.fusion;
    let mut adam = Adam::new(
        &store,
        config.optimizer.lr_backbone,
        config.optimizer.lr_main,
    );

    let mut metrics = Vec::new();
    if config.experiment.epochs == 0 {
        metrics.push(evaluate_state(
            config,
            &model,
            &store,
            &space,
            &train_scenes,
            &eval_scenes,
            fusion,
            0,
            LossBreakdown::default(),
        )?);
    }

    let mut order: Vec<usize> = (0..train_scenes.len()).collect();
    let mut epoch_rng = ChaCha8Rng::seed_from_u64(config.experiment.seed.wrapping_add(17));
    let mut step = 0usize;
    for epoch in 1..=config.experiment.epochs {
        order.shuffle(&mut epoch_rng);
        let mut sums = LossBreakdown::default();
        let mut batches = 0usize;
        for chunk in order.chunks(config.experiment.batch_size) {
            let batch: Vec<&SyntheticScene> = chunk.iter().map(|&i| &train_scenes[i]).collect();
            let breakdown =
                train_step(&model, &mut store, &mut adam, &batch, &space, &settings, step)?;
            sums = add_breakdowns(sums, breakdown);
            batches += 1;
            step += 1;
        }
        let mean_losses = scale_breakdown(sums, 1.0 / batches.max(1) as f64);
        let is_final = epoch == config.experiment.epochs;
        let due = config.experiment.eval_interval > 0
            && epoch % config.experiment.eval_interval == 0;
        if is_final || due {
            metrics.push(evaluate_state(
                config,
                &model,
                &store,
                &space,
                &train_scenes,
                &eval_scenes,
                fusion,
                epoch,
                mean_losses,
            )?);
        }
    }

    let record = RunRecord {
        config_hash: config.content_hash(),
        seed: config.experiment.seed,
        metrics,
        wall_clock_secs: start.elapsed().as_secs_f64(),
        checkpoint_path: None,
    };
    Ok((
        record,
        Trained {
            config: config.clone(),
            model,
            store,
            space,
        },
    ))
}

fn add_breakdowns(a: LossBreakdown, b: LossBreakdown) -> LossBreakdown {
    LossBreakdown {
        cls: a.cls + b.cls,
        l1: a.l1 + b.l1,
        giou: a.giou + b.giou,
        align: a.align + b.align,
        distill: a.distill + b.distill,
        aux: a.aux + b.aux,
        enc_cls: a.enc_cls + b.enc_cls,
        total: a.total + b.total,
    }
}

fn scale_breakdown(a: LossBreakdown, s: f64) -> LossBreakdown {
    LossBreakdown {
        cls: a.cls * s,
        l1: a.l1 * s,
        giou: a.giou * s,
        align: a.align * s,
        distill: a.distill * s,
        aux: a.aux * s,
        enc_cls: a.enc_cls * s,
        total: a.total * s,
    }
}

/// Line-delimited record dump: `scene_id, category, cx, cy, w, h[, score]`.
pub fn write_ground_truth(scenes: &[SyntheticScene], path: &Path) -> anyhow::Result<()> {
    let mut out = String::new();
    for (scene_id, scene) in scenes.iter().enumerate() {
        for (b, cat) in &scene.instances {
            out.push_str(&format!(
                "{scene_id}, {cat}, {}, {}, {}, {}\n",
                b.cx, b.cy, b.w, b.h
            ));
        }
    }
    std::fs::write(path, out)?;
    Ok(())
}

pub fn write_detections(detections: &[Vec<Detection>], path: &Path) -> anyhow::Result<()> {
    let mut out = String::new();
    for (scene_id, dets) in detections.iter().enumerate() {
        for d in dets {
            out.push_str(&format!(
                "{scene_id}, {}, {}, {}, {}, {}, {}\n",
                d.category, d.bbox.cx, d.bbox.cy, d.bbox.w, d.bbox.h, d.score
            ));
        }
    }
    std::fs::write(path, out)?;
    Ok(())
}

/// Per-split corpus descriptor: regeneration beats storing grids.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CorpusSpecFile {
    pub split: String,
    pub space: viplab_core::bench::CategorySpaceConfig,
    pub scene: viplab_core::bench::SceneConfig,
    pub scene_seeds: Vec<u64>,
}

pub fn write_corpus_spec(
    config: &ExperimentConfig,
    split: &str,
    count: usize,
    path: &Path,
) -> anyhow::Result<()> {
    let spec = CorpusSpecFile {
        split: split.to_string(),
        space: config.space_config(),
        scene: config.scene_config(),
        scene_seeds: split_seeds(config.experiment.seed, split, count),
    };
    std::fs::write(path, serde_json::to_string_pretty(&spec)?)?;
    Ok(())
}

pub fn read_corpus_spec(path: &Path) -> anyhow::Result<(CorpusSpecFile, Vec<SyntheticScene>)> {
    let text = std::fs::read_to_string(path)?;
    let spec: CorpusSpecFile = serde_json::from_str(&text)?;
    let space = generate_category_space(&spec.space)?;
    let scenes = generate_corpus(&space, &spec.scene, &spec.scene_seeds)?;
    Ok((spec, scenes))
}
