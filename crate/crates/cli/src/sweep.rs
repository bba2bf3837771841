//! Prompt-count robustness sweep: evaluate a trained checkpoint with the
//! bank restricted to each target category plus n-1 distractor prototypes,
//! under both full and selective fusion modes.

use anyhow::bail;
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use viplab_core::bench::protocol;
use viplab_core::fusion::FusionMode;
use viplab_core::model::FusionSettings;

use crate::runner::{build_corpora, Trained};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SweepCell {
    pub mode: String,
    pub n: usize,
    pub category: u32,
    pub ap: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SweepCurvePoint {
    pub mode: String,
    pub n: usize,
    pub mean_ap: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SweepReport {
    pub config_hash: String,
    pub counts: Vec<usize>,
    pub cells: Vec<SweepCell>,
    pub curves: Vec<SweepCurvePoint>,
    /// max - min of the mean curve, per mode.
    pub spread_full: f64,
    pub spread_selective: f64,
}

/// Fusion settings for evaluating the checkpoint with every active fusion
/// placement forced to the given mode.
fn eval_fusion(trained: &Trained, mode: FusionMode) -> anyhow::Result<FusionSettings> {
    let trained_fusion = trained.config.fusion_settings()?;
    Ok(FusionSettings {
        encoder: if trained_fusion.encoder == FusionMode::None {
            FusionMode::None
        } else {
            mode
        },
        decoder: if trained_fusion.decoder == FusionMode::None {
            FusionMode::None
        } else {
            mode
        },
        theta: trained_fusion.theta,
    })
}

/// Run the sweep. The checkpoint must have been trained with global prompt
/// integration and at least one fusion placement.
pub fn run_prompt_count_sweep(
    trained: &Trained,
    counts: &[usize],
) -> anyhow::Result<SweepReport> {
    if !trained.config.loss.global_integration {
        bail!("prompt-count sweep requires a checkpoint trained with global integration");
    }
    let trained_fusion = trained.config.fusion_settings()?;
    if trained_fusion.encoder == FusionMode::None && trained_fusion.decoder == FusionMode::None {
        bail!("prompt-count sweep requires a checkpoint trained with a fusion placement");
    }
    let k = trained.space.k();
    for &n in counts {
        if n == 0 || n > k {
            bail!("prompt count {n} outside 1..={k}");
        }
    }

    let (train_scenes, eval_scenes) = build_corpora(&trained.config, &trained.space)?;
    let categories: Vec<u32> = (0..k as u32).collect();
    let bank = protocol::visual_g_prompts(
        &trained.model,
        &trained.store,
        &categories,
        &train_scenes,
        trained.config.corpus.support_per_class,
        trained.config.experiment.seed ^ 0x5eed,
    )?;
    let gts: Vec<Vec<(viplab_core::boxes::BoxSpec, u32)>> =
        eval_scenes.iter().map(|s| s.instances.clone()).collect();

    let mut cells = Vec::new();
    let mut curves = Vec::new();
    let mut spreads = [0.0_f64; 2];
    for (mode_idx, mode) in [FusionMode::Full, FusionMode::Selective].into_iter().enumerate() {
        let fusion = eval_fusion(trained, mode)?;
        let mut curve = Vec::new();
        for &n in counts {
            let mut per_cat = Vec::new();
            for &target in &categories {
                // Distractors drawn from the trained bank in a fixed
                // seeded order per target category.
                let mut others: Vec<u32> =
                    categories.iter().copied().filter(|&c| c != target).collect();
                let mut rng = ChaCha8Rng::seed_from_u64(
                    trained.config.experiment.seed ^ ((target as u64 + 1) * 0x9e37),
                );
                others.shuffle(&mut rng);
                let mut labels = vec![target];
                labels.extend(others.into_iter().take(n - 1));

                let (matrix, labels) = protocol::restricted_bank_matrix(&bank, &labels)?;
                let mut detections = Vec::with_capacity(eval_scenes.len());
                for scene in &eval_scenes {
                    detections.push(trained.model.detect(
                        &trained.store,
                        &scene.grid,
                        &matrix,
                        &labels,
                        fusion,
                    ));
                }
                let report = viplab_core::bench::evaluate_ap(&detections, &gts, 0.5);
                let ap = report.per_category.get(&target).copied().unwrap_or(0.0);
                cells.push(SweepCell {
                    mode: mode.to_string(),
                    n,
                    category: target,
                    ap,
                });
                per_cat.push(ap);
            }
            let mean_ap = per_cat.iter().sum::<f64>() / per_cat.len() as f64;
            curve.push(mean_ap);
            curves.push(SweepCurvePoint {
                mode: mode.to_string(),
                n,
                mean_ap,
            });
        }
        let max = curve.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let min = curve.iter().copied().fold(f64::INFINITY, f64::min);
        spreads[mode_idx] = max - min;
    }

    Ok(SweepReport {
        config_hash: trained.config.content_hash(),
        counts: counts.to_vec(),
        cells,
        curves,
        spread_full: spreads[0],
        spread_selective: spreads[1],
    })
}

pub fn sweep_csv(report: &SweepReport) -> String {
    let mut out = String::from("mode,n,category,ap\n");
    for cell in &report.cells {
        out.push_str(&format!(
            "{},{},{},{}\n",
            cell.mode, cell.n, cell.category, cell.ap
        ));
    }
    out
}

pub fn sweep_curve_csv(report: &SweepReport) -> String {
    let mut out = String::from("mode,n,mean_ap\n");
    for point in &report.curves {
        out.push_str(&format!("{},{},{}\n", point.mode, point.n, point.mean_ap));
    }
    out
}
