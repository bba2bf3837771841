//! The ablation ladder: eight variants in roadmap order (four cumulative
//! non-fusion rows, two standalone full-fusion rows, two cumulative
//! selective-fusion rows) plus the supervised-contrastive comparison,
//! each trained over several seeds.

use serde::{Deserialize, Serialize};

use crate::config::ExperimentConfig;
use crate::runner::{run_training, RunRecord};

/// Rows of the roadmap, in report order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum LadderVariant {
    Baseline,
    Align,
    GlobalIntegration,
    Distill,
    /// Standalone: full encoder fusion on top of the distill row; not
    /// accumulated into later rows.
    EncoderFusion,
    EncoderSelectiveFusion,
    /// Standalone: full decoder fusion on top of the encoder-selective row.
    DecoderFusion,
    DecoderSelectiveFusion,
}

pub const LADDER_ORDER: [LadderVariant; 8] = [
    LadderVariant::Baseline,
    LadderVariant::Align,
    LadderVariant::GlobalIntegration,
    LadderVariant::Distill,
    LadderVariant::EncoderFusion,
    LadderVariant::EncoderSelectiveFusion,
    LadderVariant::DecoderFusion,
    LadderVariant::DecoderSelectiveFusion,
];

impl LadderVariant {
    pub fn name(&self) -> &'static str {
        match self {
            Self::Baseline => "baseline",
            Self::Align => "+align",
            Self::GlobalIntegration => "+global_integration",
            Self::Distill => "+distill",
            Self::EncoderFusion => "+encoder_fusion(standalone)",
            Self::EncoderSelectiveFusion => "+encoder_selective_fusion",
            Self::DecoderFusion => "+decoder_fusion(standalone)",
            Self::DecoderSelectiveFusion => "+decoder_selective_fusion",
        }
    }

    /// Build this variant's config from the base. Only loss flags and
    /// fusion modes may change.
    pub fn apply(&self, base: &ExperimentConfig) -> ExperimentConfig {
        let mut config = base.clone();
        config.loss.align = false;
        config.loss.global_integration = false;
        config.loss.distill = false;
        config.loss.scl_instead_of_distill = false;
        config.fusion.encoder = "none".into();
        config.fusion.decoder = "none".into();
        match self {
            Self::Baseline => {}
            Self::Align => {
                config.loss.align = true;
            }
            Self::GlobalIntegration => {
                config.loss.align = true;
                config.loss.global_integration = true;
            }
            Self::Distill => {
                config.loss.align = true;
                config.loss.global_integration = true;
                config.loss.distill = true;
            }
            Self::EncoderFusion => {
                config.loss.align = true;
                config.loss.global_integration = true;
                config.loss.distill = true;
                config.fusion.encoder = "full".into();
            }
            Self::EncoderSelectiveFusion => {
                config.loss.align = true;
                config.loss.global_integration = true;
                config.loss.distill = true;
                config.fusion.encoder = "selective".into();
            }
            Self::DecoderFusion => {
                config.loss.align = true;
                config.loss.global_integration = true;
                config.loss.distill = true;
                config.fusion.encoder = "selective".into();
                config.fusion.decoder = "full".into();
            }
            Self::DecoderSelectiveFusion => {
                config.loss.align = true;
                config.loss.global_integration = true;
                config.loss.distill = true;
                config.fusion.encoder = "selective".into();
                config.fusion.decoder = "selective".into();
            }
        }
        config
    }
}

/// The comparison row of the distillation-vs-contrastive study.
pub fn scl_comparison_config(base: &ExperimentConfig) -> ExperimentConfig {
    let mut config = LadderVariant::Distill.apply(base);
    config.loss.distill = false;
    config.loss.scl_instead_of_distill = true;
    config
}

/// Variant configs may differ from the base only in loss flags and fusion
/// modes; everything else must match bit for bit.
pub fn assert_only_documented_flags_differ(base: &ExperimentConfig, variant: &ExperimentConfig) {
    let mut neutral_base = base.clone();
    let mut neutral_variant = variant.clone();
    for config in [&mut neutral_base, &mut neutral_variant] {
        config.loss.align = false;
        config.loss.global_integration = false;
        config.loss.distill = false;
        config.loss.scl_instead_of_distill = false;
        config.fusion.encoder = "none".into();
        config.fusion.decoder = "none".into();
    }
    assert_eq!(
        neutral_base, neutral_variant,
        "ladder variant changed a non-flag field"
    );
}

/// Mean and sample standard deviation.
fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// One ladder row's aggregated statistics.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LadderRow {
    pub variant: String,
    pub seeds: usize,
    pub failed_seeds: Vec<u64>,
    pub mean_visual_g_map: f64,
    pub std_visual_g_map: f64,
    pub mean_visual_i_map: f64,
    pub mean_iisr: f64,
    pub std_iisr: f64,
    pub records: Vec<RunRecord>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LadderReport {
    pub base_hash: String,
    pub rows: Vec<LadderRow>,
    pub scl_row: LadderRow,
}

fn aggregate(variant_name: &str, outcomes: Vec<(u64, Option<RunRecord>)>) -> LadderRow {
    let mut maps = Vec::new();
    let mut i_maps = Vec::new();
    let mut ratios = Vec::new();
    let mut failed = Vec::new();
    let mut records = Vec::new();
    for (seed, outcome) in outcomes {
        match outcome {
            Some(record) => {
                let last = record.final_metrics();
                maps.push(last.visual_g_map);
                i_maps.push(last.visual_i_map);
                if let Some(r) = last.iisr {
                    ratios.push(r);
                }
                records.push(record);
            }
            None => failed.push(seed),
        }
    }
    let (mean_map, std_map) = if maps.is_empty() {
        (f64::NAN, f64::NAN)
    } else {
        mean_std(&maps)
    };
    let (mean_i, _) = if i_maps.is_empty() {
        (f64::NAN, 0.0)
    } else {
        mean_std(&i_maps)
    };
    let (mean_iisr, std_iisr) = if ratios.is_empty() {
        (f64::NAN, f64::NAN)
    } else {
        mean_std(&ratios)
    };
    LadderRow {
        variant: variant_name.to_string(),
        seeds: records.len(),
        failed_seeds: failed,
        mean_visual_g_map: mean_map,
        std_visual_g_map: std_map,
        mean_visual_i_map: mean_i,
        mean_iisr,
        std_iisr,
        records,
    }
}

/// Train every ladder variant (plus the contrastive comparison) over
/// `n_seeds` seeds. Jobs fan out over a small thread pool; each run is
/// single-threaded and deterministic, and results land in fixed slots so
/// the report does not depend on scheduling.
pub fn run_ablation_ladder(base: &ExperimentConfig) -> anyhow::Result<LadderReport> {
    let n_seeds = base.experiment.n_seeds.max(1) as u64;
    let mut jobs: Vec<(usize, ExperimentConfig)> = Vec::new();
    let mut job_meta: Vec<(String, u64)> = Vec::new();
    for variant in LADDER_ORDER {
        let config = variant.apply(base);
        assert_only_documented_flags_differ(base, &config);
        for seed in 0..n_seeds {
            let mut seeded = config.clone();
            seeded.experiment.seed = base.experiment.seed.wrapping_add(seed);
            jobs.push((job_meta.len(), seeded));
            job_meta.push((variant.name().to_string(), seed));
        }
    }
    let scl_config = scl_comparison_config(base);
    assert_only_documented_flags_differ(base, &scl_config);
    for seed in 0..n_seeds {
        let mut seeded = scl_config.clone();
        seeded.experiment.seed = base.experiment.seed.wrapping_add(seed);
        jobs.push((job_meta.len(), seeded));
        job_meta.push(("scl_comparison".to_string(), seed));
    }

    let results = run_jobs(jobs);

    let mut rows = Vec::new();
    for variant in LADDER_ORDER {
        let outcomes: Vec<(u64, Option<RunRecord>)> = job_meta
            .iter()
            .enumerate()
            .filter(|(_, (name, _))| name == variant.name())
            .map(|(idx, (_, seed))| (*seed, results[idx].clone()))
            .collect();
        rows.push(aggregate(variant.name(), outcomes));
    }
    let scl_outcomes: Vec<(u64, Option<RunRecord>)> = job_meta
        .iter()
        .enumerate()
        .filter(|(_, (name, _))| name == "scl_comparison")
        .map(|(idx, (_, seed))| (*seed, results[idx].clone()))
        .collect();
    let scl_row = aggregate("scl_comparison", scl_outcomes);

    Ok(LadderReport {
        base_hash: base.content_hash(),
        rows,
        scl_row,
    })
}

/// Run training jobs across a small pool of worker threads; failed runs
/// (numeric aborts) become `None`.
fn run_jobs(jobs: Vec<(usize, ExperimentConfig)>) -> Vec<Option<RunRecord>> {
    let total = jobs.len();
    let workers = std::thread::available_parallelism()
        .map(|n| n.get())
        .unwrap_or(1)
        .min(total.max(1));
    let queue = std::sync::Mutex::new(jobs.into_iter());
    let results: Vec<std::sync::Mutex<Option<RunRecord>>> =
        (0..total).map(|_| std::sync::Mutex::new(None)).collect();
    std::thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| loop {
                let job = queue.lock().unwrap().next();
                let Some((slot, config)) = job else { break };
                if let Ok((record, _)) = run_training(&config) {
                    *results[slot].lock().unwrap() = Some(record);
                }
            });
        }
    });
    results
        .into_iter()
        .map(|m| m.into_inner().unwrap())
        .collect()
}

/// CSV mirroring the IISR-vs-mAP trend figure: one row per ladder variant.
pub fn iisr_vs_map_csv(report: &LadderReport) -> String {
    let mut out = String::from(
        "variant,mean_visual_g_map,std_visual_g_map,mean_visual_i_map,mean_iisr,std_iisr,seeds,failed\n",
    );
    for row in &report.rows {
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{}\n",
            row.variant,
            row.mean_visual_g_map,
            row.std_visual_g_map,
            row.mean_visual_i_map,
            row.mean_iisr,
            row.std_iisr,
            row.seeds,
            row.failed_seeds.len(),
        ));
    }
    out
}

pub fn scl_comparison_csv(report: &LadderReport) -> String {
    let distill = report
        .rows
        .iter()
        .find(|r| r.variant == "+distill")
        .expect("distill row");
    let mut out = String::from("variant,mean_visual_g_map,std_visual_g_map,mean_iisr\n");
    for row in [distill, &report.scl_row] {
        out.push_str(&format!(
            "{},{},{},{}\n",
            row.variant, row.mean_visual_g_map, row.std_visual_g_map, row.mean_iisr
        ));
    }
    out
}
