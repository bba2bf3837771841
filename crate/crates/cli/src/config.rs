//! Experiment configuration: TOML sections, dotted-path overrides, the
//! `VIPLAB_SEED` environment override, validation, and a content hash that
//! ignores formatting.

use anyhow::{bail, Context};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use viplab_core::bench::train::TrainSettings;
use viplab_core::bench::{CategorySpaceConfig, SceneConfig};
use viplab_core::fusion::{FusionMode, FusionThreshold};
use viplab_core::losses::{FocalParams, LossWeights, Temperatures};
use viplab_core::model::{FusionSettings, ModelConfig};
use viplab_core::prompt::PromptEncoderConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentSection {
    pub seed: u64,
    pub epochs: usize,
    pub batch_size: usize,
    /// Evaluate every n epochs; 0 evaluates only after the final epoch.
    pub eval_interval: usize,
    /// Seeds for ladder / sweep statistics.
    pub n_seeds: usize,
}

impl Default for ExperimentSection {
    fn default() -> Self {
        Self {
            seed: 0,
            epochs: 8,
            batch_size: 6,
            eval_interval: 0,
            n_seeds: 5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SpaceSection {
    pub k: usize,
    pub dim: usize,
    pub groups: usize,
    pub text_spread: f64,
    pub visual_offset: f64,
    pub anchor_correlation: f64,
}

impl Default for SpaceSection {
    fn default() -> Self {
        let d = CategorySpaceConfig::default();
        Self {
            k: d.k,
            dim: d.dim,
            groups: d.groups,
            text_spread: d.text_spread,
            visual_offset: d.visual_offset,
            anchor_correlation: d.anchor_correlation,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CorpusSection {
    pub train_scenes: usize,
    pub eval_scenes: usize,
    pub support_per_class: usize,
    pub grid_h: usize,
    pub grid_w: usize,
    pub max_instances: usize,
    pub sigma_inst: f64,
    pub sigma_scene: f64,
    pub min_box: f64,
    pub max_box: f64,
    pub iou_cap: f64,
}

impl Default for CorpusSection {
    fn default() -> Self {
        let d = SceneConfig::default();
        Self {
            train_scenes: 512,
            eval_scenes: 32,
            support_per_class: 4,
            grid_h: d.grid_h,
            grid_w: d.grid_w,
            max_instances: d.max_instances,
            sigma_inst: d.sigma_inst,
            sigma_scene: d.sigma_scene,
            min_box: d.min_box,
            max_box: d.max_box,
            iou_cap: d.iou_cap,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub dim: usize,
    pub backbone_hidden: usize,
    pub enc_layers: usize,
    pub dec_layers: usize,
    pub heads: usize,
    pub points: usize,
    pub prompt_layers: usize,
    pub prompt_heads: usize,
    pub prompt_points: usize,
    pub top_k: usize,
    pub score_threshold: f64,
    pub token_reach: f64,
    pub anchor_size: f64,
}

impl Default for ModelSection {
    fn default() -> Self {
        let d = ModelConfig::default();
        Self {
            dim: d.dim,
            backbone_hidden: d.backbone_hidden,
            enc_layers: d.enc_layers,
            dec_layers: 3,
            heads: d.heads,
            points: d.points,
            prompt_layers: d.prompt.layers,
            prompt_heads: d.prompt.heads,
            prompt_points: d.prompt.points,
            top_k: d.top_k,
            score_threshold: d.score_threshold,
            token_reach: d.token_reach,
            anchor_size: d.anchor_size,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossSection {
    pub align: bool,
    pub global_integration: bool,
    pub distill: bool,
    pub scl_instead_of_distill: bool,
    pub lambda_cls: f64,
    pub lambda_l1: f64,
    pub lambda_giou: f64,
    pub lambda_align: f64,
    pub lambda_distill: f64,
    pub alpha: f64,
    pub gamma: f64,
    pub tau_t: f64,
    pub tau_v: f64,
    pub align_tau: f64,
    pub aux_weight: f64,
    pub enc_cls_weight: f64,
}

impl Default for LossSection {
    fn default() -> Self {
        let w = LossWeights::default();
        let f = FocalParams::default();
        let t = Temperatures::default();
        let s = TrainSettings::default();
        Self {
            align: false,
            global_integration: false,
            distill: false,
            scl_instead_of_distill: false,
            lambda_cls: w.lambda_cls,
            lambda_l1: w.lambda_l1,
            lambda_giou: w.lambda_giou,
            lambda_align: w.lambda_align,
            lambda_distill: w.lambda_distill,
            alpha: f.alpha,
            gamma: f.gamma,
            tau_t: t.tau_t,
            tau_v: t.tau_v,
            align_tau: s.align_tau,
            aux_weight: s.aux_weight,
            enc_cls_weight: 2.5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FusionSection {
    pub encoder: String,
    pub decoder: String,
    pub theta: f64,
}

impl Default for FusionSection {
    fn default() -> Self {
        Self {
            encoder: "none".into(),
            decoder: "none".into(),
            theta: 0.1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimizerSection {
    pub lr_backbone: f64,
    pub lr_main: f64,
}

impl Default for OptimizerSection {
    fn default() -> Self {
        Self {
            lr_backbone: 1e-4,
            lr_main: 1e-3,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub experiment: ExperimentSection,
    pub space: SpaceSection,
    pub corpus: CorpusSection,
    pub model: ModelSection,
    pub loss: LossSection,
    pub fusion: FusionSection,
    pub optimizer: OptimizerSection,
}

impl ExperimentConfig {
    /// Parse TOML text, apply `--set section.key=value` overrides, then the
    /// `VIPLAB_SEED` environment variable.
    pub fn from_toml(text: &str, overrides: &[String]) -> anyhow::Result<Self> {
        let mut table: toml::Table = text.parse().context("invalid TOML")?;
        for entry in overrides {
            let (path, value) = entry
                .split_once('=')
                .with_context(|| format!("override {entry:?} is not key=value"))?;
            apply_override(&mut table, path.trim(), value.trim())?;
        }
        let mut config: ExperimentConfig = table
            .try_into()
            .context("config does not match the schema")?;
        if let Ok(seed) = std::env::var("VIPLAB_SEED") {
            config.experiment.seed = seed
                .parse()
                .context("VIPLAB_SEED must be an unsigned integer")?;
        }
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: &std::path::Path, overrides: &[String]) -> anyhow::Result<Self> {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("reading config {}", path.display()))?;
        Self::from_toml(&text, overrides)
    }

    pub fn validate(&self) -> anyhow::Result<()> {
        if self.loss.distill && self.loss.scl_instead_of_distill {
            bail!("loss.distill and loss.scl_instead_of_distill are mutually exclusive");
        }
        self.fusion_settings()?;
        if !(self.fusion.theta > 0.0 && self.fusion.theta < 1.0) {
            bail!("fusion.theta must lie in (0, 1)");
        }
        self.loss_weights().validate().map_err(anyhow::Error::new)?;
        self.focal_params().validate().map_err(anyhow::Error::new)?;
        if self.experiment.batch_size == 0 || self.experiment.epochs == 0 {
            bail!("experiment.batch_size and experiment.epochs must be positive");
        }
        if self.model.dim % 8 != 0 {
            bail!("model.dim must be divisible by 8 (box encoding slots)");
        }
        Ok(())
    }

    /// Hash of the semantic content: the parsed struct in canonical JSON,
    /// so formatting, key order, and comments do not matter.
    pub fn content_hash(&self) -> String {
        let canonical = serde_json::to_string(self).expect("config serializes");
        let mut hasher = Sha256::new();
        hasher.update(canonical.as_bytes());
        hex_string(&hasher.finalize())
    }

    pub fn space_config(&self) -> CategorySpaceConfig {
        CategorySpaceConfig {
            k: self.space.k,
            dim: self.space.dim,
            groups: self.space.groups,
            seed: self.experiment.seed,
            text_spread: self.space.text_spread,
            visual_offset: self.space.visual_offset,
            anchor_correlation: self.space.anchor_correlation,
        }
    }

    pub fn scene_config(&self) -> SceneConfig {
        SceneConfig {
            grid_h: self.corpus.grid_h,
            grid_w: self.corpus.grid_w,
            max_instances: self.corpus.max_instances,
            sigma_inst: self.corpus.sigma_inst,
            sigma_scene: self.corpus.sigma_scene,
            min_box: self.corpus.min_box,
            max_box: self.corpus.max_box,
            iou_cap: self.corpus.iou_cap,
        }
    }

    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            dim: self.model.dim,
            backbone_hidden: self.model.backbone_hidden,
            enc_layers: self.model.enc_layers,
            dec_layers: self.model.dec_layers,
            heads: self.model.heads,
            points: self.model.points,
            prompt: PromptEncoderConfig {
                dim: self.model.dim,
                content_dim: self.model.dim,
                layers: self.model.prompt_layers,
                heads: self.model.prompt_heads,
                points: self.model.prompt_points,
            },
            top_k: self.model.top_k,
            score_threshold: self.model.score_threshold,
            token_reach: self.model.token_reach,
            anchor_size: self.model.anchor_size,
        }
    }

    pub fn loss_weights(&self) -> LossWeights {
        LossWeights {
            lambda_cls: self.loss.lambda_cls,
            lambda_l1: self.loss.lambda_l1,
            lambda_giou: self.loss.lambda_giou,
            lambda_align: self.loss.lambda_align,
            lambda_distill: self.loss.lambda_distill,
        }
    }

    pub fn focal_params(&self) -> FocalParams {
        FocalParams {
            alpha: self.loss.alpha,
            gamma: self.loss.gamma,
        }
    }

    pub fn fusion_settings(&self) -> anyhow::Result<FusionSettings> {
        let encoder: FusionMode = self
            .fusion
            .encoder
            .parse()
            .map_err(anyhow::Error::new)?;
        let decoder: FusionMode = self
            .fusion
            .decoder
            .parse()
            .map_err(anyhow::Error::new)?;
        Ok(FusionSettings {
            encoder,
            decoder,
            theta: FusionThreshold::new(self.fusion.theta).map_err(anyhow::Error::new)?,
        })
    }

    pub fn train_settings(&self) -> anyhow::Result<TrainSettings> {
        Ok(TrainSettings {
            weights: self.loss_weights(),
            focal: self.focal_params(),
            temps: Temperatures {
                tau_t: self.loss.tau_t,
                tau_v: self.loss.tau_v,
            },
            align_tau: self.loss.align_tau,
            align: self.loss.align,
            distill: self.loss.distill,
            scl_instead_of_distill: self.loss.scl_instead_of_distill,
            global_integration: self.loss.global_integration,
            fusion: self.fusion_settings()?,
            aux_weight: self.loss.aux_weight,
            enc_cls_weight: self.loss.enc_cls_weight,
        })
    }
}

fn apply_override(table: &mut toml::Table, path: &str, raw: &str) -> anyhow::Result<()> {
    let parts: Vec<&str> = path.split('.').collect();
    if parts.len() != 2 {
        bail!("override path {path:?} must be section.key");
    }
    let value = parse_toml_value(raw);
    let section = table
        .entry(parts[0].to_string())
        .or_insert_with(|| toml::Value::Table(toml::Table::new()));
    let toml::Value::Table(section) = section else {
        bail!("{} is not a section", parts[0]);
    };
    section.insert(parts[1].to_string(), value);
    Ok(())
}

fn parse_toml_value(raw: &str) -> toml::Value {
    if let Ok(b) = raw.parse::<bool>() {
        return toml::Value::Boolean(b);
    }
    if let Ok(i) = raw.parse::<i64>() {
        return toml::Value::Integer(i);
    }
    if let Ok(f) = raw.parse::<f64>() {
        return toml::Value::Float(f);
    }
    toml::Value::String(raw.trim_matches('"').to_string())
}

fn hex_string(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_parse_and_validate() {
        let config = ExperimentConfig::from_toml("", &[]).unwrap();
        assert_eq!(config.space.k, 12);
        assert_eq!(config.experiment.n_seeds, 5);
    }

    #[test]
    fn hash_ignores_formatting_and_comments() {
        let a = ExperimentConfig::from_toml("[experiment]\nseed = 3\nepochs = 2\n", &[]).unwrap();
        let b = ExperimentConfig::from_toml(
            "# a comment\n[experiment]\nepochs   =   2\n# more\nseed=3\n",
            &[],
        )
        .unwrap();
        assert_eq!(a.content_hash(), b.content_hash());
        let c = ExperimentConfig::from_toml("[experiment]\nseed = 4\nepochs = 2\n", &[]).unwrap();
        assert_ne!(a.content_hash(), c.content_hash());
    }

    #[test]
    fn overrides_apply_with_type_inference() {
        let config = ExperimentConfig::from_toml(
            "",
            &[
                "experiment.seed=9".into(),
                "loss.align=true".into(),
                "fusion.encoder=selective".into(),
                "optimizer.lr_main=0.002".into(),
            ],
        )
        .unwrap();
        assert_eq!(config.experiment.seed, 9);
        assert!(config.loss.align);
        assert_eq!(config.fusion.encoder, "selective");
        assert!((config.optimizer.lr_main - 0.002).abs() < 1e-12);
    }

    #[test]
    fn mutually_exclusive_flags_rejected() {
        let err = ExperimentConfig::from_toml(
            "[loss]\ndistill = true\nscl_instead_of_distill = true\n",
            &[],
        )
        .unwrap_err();
        assert!(err.to_string().contains("mutually exclusive"));
    }

    #[test]
    fn bad_fusion_mode_rejected() {
        assert!(ExperimentConfig::from_toml("[fusion]\nencoder = \"sometimes\"\n", &[]).is_err());
    }

    #[test]
    fn unknown_keys_rejected() {
        assert!(ExperimentConfig::from_toml("[experiment]\nbanana = 1\n", &[]).is_err());
    }
}
