//! The toy detector: a per-cell backbone, a deformable encoder with
//! optional prompt fusion, prompt-based scoring of encoder tokens, top-k
//! query initialization, and a decoder with per-layer box refinement and
//! optional fusion. Classification is always `sigmoid(Q P^T + b)` against
//! the prompt bank.

use ndarray::{Array1, Array2};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::bench::Detection;
use crate::boxes::BoxSpec;
use crate::fusion::{FusionLayer, FusionMode, FusionThreshold};
use crate::layers::{Attention, DeformableRead};
use crate::nn::{Fwd, Mlp, ParamGroup, ParamId, ParamStore, Var};
use crate::prompt::{
    grid_position_encoding, grid_token_boxes, FeatureGrid, PromptEncoder, PromptEncoderConfig,
};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub dim: usize,
    pub backbone_hidden: usize,
    pub enc_layers: usize,
    pub dec_layers: usize,
    pub heads: usize,
    pub points: usize,
    pub prompt: PromptEncoderConfig,
    pub top_k: usize,
    pub score_threshold: f64,
    /// Reference-box side of grid tokens in the encoder's deformable
    /// self-attention: how far a token can reach around itself.
    pub token_reach: f64,
    /// Initial width/height of decoder anchor boxes.
    pub anchor_size: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            dim: 32,
            backbone_hidden: 64,
            enc_layers: 2,
            dec_layers: 2,
            heads: 2,
            points: 4,
            prompt: PromptEncoderConfig::default(),
            top_k: 20,
            score_threshold: 0.05,
            token_reach: 0.25,
            anchor_size: 0.25,
        }
    }
}

/// Fusion behavior of one forward pass; the layers always exist in the
/// parameter store, the settings decide whether they run.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FusionSettings {
    pub encoder: FusionMode,
    pub decoder: FusionMode,
    pub theta: FusionThreshold,
}

impl FusionSettings {
    pub fn none() -> Self {
        Self {
            encoder: FusionMode::None,
            decoder: FusionMode::None,
            theta: FusionThreshold::default(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct EncoderLayer {
    read: DeformableRead,
    ffn: Mlp,
    fusion: FusionLayer,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct DecoderLayer {
    fusion: FusionLayer,
    self_attn: Attention,
    cross_read: DeformableRead,
    ffn: Mlp,
    box_head: Mlp,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ToyDetector {
    pub config: ModelConfig,
    backbone: Mlp,
    pub prompt_encoder: PromptEncoder,
    enc_layers: Vec<EncoderLayer>,
    dec_layers: Vec<DecoderLayer>,
    pub score_bias: ParamId,
}

/// Everything a training step needs from one forward pass.
pub struct ForwardOut {
    /// Backbone features plus positional encoding (the prompt-extraction grid).
    pub backbone_tokens: Var,
    /// Encoder output tokens.
    pub enc_tokens: Var,
    /// Prompt bank after encoder fusion (identical to the input bank when
    /// encoder fusion is off).
    pub fused_bank: Var,
    /// Token-level scores against the fused bank, (h*w) x C.
    pub enc_scores: Var,
    /// Indices of the tokens chosen as decoder queries.
    pub top_k: Vec<usize>,
    /// Per decoder layer: query scores (k x C).
    pub layer_scores: Vec<Var>,
    /// Per decoder layer: refined boxes (k x 4, center format, in (0,1)).
    pub layer_boxes: Vec<Var>,
    /// Boxes of each layer as plain values, for matching.
    pub layer_box_values: Vec<Vec<BoxSpec>>,
    /// Auxiliary gating-branch outputs (1 x C), one per selective fusion
    /// application, for training the presence branch.
    pub aux_maxes: Vec<Var>,
}

impl ToyDetector {
    pub fn new(store: &mut ParamStore, rng: &mut ChaCha8Rng, config: ModelConfig) -> Self {
        let d = config.dim;
        let backbone = Mlp::new(
            store,
            rng,
            "backbone",
            ParamGroup::Backbone,
            d,
            config.backbone_hidden,
            d,
        );
        let prompt_encoder = PromptEncoder::new(store, rng, "prompt_encoder", config.prompt);
        let enc_layers = (0..config.enc_layers)
            .map(|l| EncoderLayer {
                read: DeformableRead::new(
                    store,
                    rng,
                    &format!("enc{l}.read"),
                    ParamGroup::Main,
                    d,
                    config.heads,
                    config.points,
                ),
                ffn: Mlp::new(
                    store,
                    rng,
                    &format!("enc{l}.ffn"),
                    ParamGroup::Main,
                    d,
                    2 * d,
                    d,
                ),
                fusion: FusionLayer::new(store, rng, &format!("enc{l}.fusion"), d),
            })
            .collect();
        let dec_layers = (0..config.dec_layers)
            .map(|l| DecoderLayer {
                fusion: FusionLayer::new(store, rng, &format!("dec{l}.fusion"), d),
                self_attn: Attention::new(
                    store,
                    rng,
                    &format!("dec{l}.self_attn"),
                    ParamGroup::Main,
                    d,
                    config.heads,
                ),
                cross_read: DeformableRead::new(
                    store,
                    rng,
                    &format!("dec{l}.cross"),
                    ParamGroup::Main,
                    d,
                    config.heads,
                    config.points,
                ),
                ffn: Mlp::new(
                    store,
                    rng,
                    &format!("dec{l}.ffn"),
                    ParamGroup::Main,
                    d,
                    2 * d,
                    d,
                ),
                box_head: Mlp::new(
                    store,
                    rng,
                    &format!("dec{l}.box_head"),
                    ParamGroup::Main,
                    d,
                    d,
                    4,
                ),
            })
            .collect();
        let score_bias = store.add("score_bias", ParamGroup::Main, Array2::from_elem((1, 1), -2.0));
        Self {
            config,
            backbone,
            prompt_encoder,
            enc_layers,
            dec_layers,
            score_bias,
        }
    }

    /// Backbone features plus positional encoding: the grid the prompt
    /// encoder reads and the encoder refines.
    pub fn backbone_features(&self, fwd: &mut Fwd, grid: &FeatureGrid) -> Var {
        let cells = fwd.tape.leaf(grid.values.clone());
        let feats = self.backbone.forward(fwd, cells);
        let feats = fwd.tape.layer_norm_rows(feats);
        let pe = grid_position_encoding(grid.h, grid.w, self.config.dim)
            .expect("model dim divisible by 8");
        let pe = fwd.tape.leaf(pe);
        fwd.tape.add(feats, pe)
    }

    fn scores_against(&self, fwd: &mut Fwd, tokens: Var, bank: Var) -> Var {
        let bias = fwd.param(self.score_bias);
        let bank_t = fwd.tape.transpose(bank);
        let logits = fwd.tape.matmul(tokens, bank_t);
        let logits = fwd.tape.add_scalar_var(logits, bias);
        fwd.tape.sigmoid(logits)
    }

    /// Full forward pass from pre-computed backbone features.
    pub fn forward_from_features(
        &self,
        fwd: &mut Fwd,
        backbone_tokens: Var,
        grid_h: usize,
        grid_w: usize,
        bank: Var,
        fusion: FusionSettings,
    ) -> ForwardOut {
        let token_boxes = grid_token_boxes(grid_h, grid_w, self.config.token_reach);
        let mut aux_maxes = Vec::new();

        // Encoder: deformable self-attention + FFN, then optional fusion.
        let mut tokens = backbone_tokens;
        let mut prompts = bank;
        for layer in &self.enc_layers {
            let read = layer
                .read
                .forward(fwd, tokens, &token_boxes, tokens, grid_h, grid_w);
            tokens = fwd.tape.add(tokens, read.output);
            tokens = fwd.tape.layer_norm_rows(tokens);
            let ffn = layer.ffn.forward(fwd, tokens);
            tokens = fwd.tape.add(tokens, ffn);
            tokens = fwd.tape.layer_norm_rows(tokens);
            let fused = layer
                .fusion
                .forward(fwd, tokens, prompts, fusion.encoder, fusion.theta);
            tokens = fused.tokens;
            prompts = fused.prompts;
            if let Some(aux) = fused.aux_max {
                aux_maxes.push(aux);
            }
        }
        let enc_tokens = tokens;
        let fused_bank = prompts;

        // Token scoring and top-k query selection.
        let enc_scores = self.scores_against(fwd, enc_tokens, fused_bank);
        let score_values = fwd.tape.value(enc_scores);
        let mut ranked: Vec<(f64, usize)> = (0..score_values.nrows())
            .map(|i| {
                let best = score_values
                    .row(i)
                    .iter()
                    .copied()
                    .fold(f64::NEG_INFINITY, f64::max);
                (best, i)
            })
            .collect();
        ranked.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)));
        let k = self.config.top_k.min(ranked.len());
        let top_k: Vec<usize> = ranked[..k].iter().map(|&(_, i)| i).collect();

        let mut queries = fwd.tape.select_rows(enc_tokens, &top_k);
        let mut anchor_logits: Array2<f64> = Array2::zeros((k, 4));
        for (row, &token) in top_k.iter().enumerate() {
            let r = token / grid_w;
            let c = token % grid_w;
            let anchor = BoxSpec::new(
                (c as f64 + 0.5) / grid_w as f64,
                (r as f64 + 0.5) / grid_h as f64,
                self.config.anchor_size,
                self.config.anchor_size,
            );
            for (j, v) in [anchor.cx, anchor.cy, anchor.w, anchor.h].into_iter().enumerate() {
                anchor_logits[[row, j]] = logit(v);
            }
        }
        let mut box_logits = fwd.tape.leaf(anchor_logits);

        let mut layer_scores = Vec::with_capacity(self.dec_layers.len());
        let mut layer_boxes = Vec::with_capacity(self.dec_layers.len());
        let mut layer_box_values = Vec::with_capacity(self.dec_layers.len());
        let mut dec_prompts = fused_bank;
        for layer in &self.dec_layers {
            let fused = layer
                .fusion
                .forward(fwd, queries, dec_prompts, fusion.decoder, fusion.theta);
            queries = fused.tokens;
            dec_prompts = fused.prompts;
            if let Some(aux) = fused.aux_max {
                aux_maxes.push(aux);
            }

            let sa = layer.self_attn.forward(fwd, queries, queries, None);
            queries = fwd.tape.add(queries, sa);
            queries = fwd.tape.layer_norm_rows(queries);

            // Cross-attention reads around the current box estimates.
            let current_boxes = boxes_from_logits(fwd.tape.value(box_logits));
            let read = layer.cross_read.forward(
                fwd,
                queries,
                &current_boxes,
                enc_tokens,
                grid_h,
                grid_w,
            );
            queries = fwd.tape.add(queries, read.output);
            queries = fwd.tape.layer_norm_rows(queries);

            let ffn = layer.ffn.forward(fwd, queries);
            queries = fwd.tape.add(queries, ffn);
            queries = fwd.tape.layer_norm_rows(queries);

            let delta = layer.box_head.forward(fwd, queries);
            box_logits = fwd.tape.add(box_logits, delta);
            let boxes = fwd.tape.sigmoid(box_logits);
            layer_box_values.push(boxes_from_logits(fwd.tape.value(box_logits)));
            layer_boxes.push(boxes);
            layer_scores.push(self.scores_against(fwd, queries, dec_prompts));
        }

        ForwardOut {
            backbone_tokens,
            enc_tokens,
            fused_bank,
            enc_scores,
            top_k,
            layer_scores,
            layer_boxes,
            layer_box_values,
            aux_maxes,
        }
    }

    /// Convenience forward from a raw scene grid.
    pub fn forward(
        &self,
        fwd: &mut Fwd,
        grid: &FeatureGrid,
        bank: Var,
        fusion: FusionSettings,
    ) -> ForwardOut {
        let feats = self.backbone_features(fwd, grid);
        self.forward_from_features(fwd, feats, grid.h, grid.w, bank, fusion)
    }

    /// Pure detection pass: final-layer boxes and scores thresholded into
    /// detections labeled by the bank's category list. Near-duplicate
    /// predictions of one category are folded by greedy NMS; at this
    /// training scale queries do not fully specialize, so several of them
    /// settle on the same instance.
    pub fn detect(
        &self,
        store: &ParamStore,
        grid: &FeatureGrid,
        bank: &Array2<f64>,
        bank_labels: &[u32],
        fusion: FusionSettings,
    ) -> Vec<Detection> {
        let mut fwd = Fwd::new(store);
        let bank_var = fwd.tape.leaf(bank.clone());
        let out = self.forward(&mut fwd, grid, bank_var, fusion);
        let scores = fwd.tape.value(*out.layer_scores.last().expect("decoder layers"));
        let boxes = out.layer_box_values.last().expect("decoder layers");
        let mut detections = Vec::new();
        for (q, bx) in boxes.iter().enumerate() {
            for (c, &label) in bank_labels.iter().enumerate() {
                let s = scores[[q, c]];
                if s > self.config.score_threshold {
                    detections.push(Detection {
                        bbox: *bx,
                        score: s,
                        category: label,
                    });
                }
            }
        }
        class_wise_nms(detections, NMS_IOU)
    }
}

const NMS_IOU: f64 = 0.6;

/// Greedy per-category non-maximum suppression, stable under score ties.
pub fn class_wise_nms(mut detections: Vec<Detection>, iou: f64) -> Vec<Detection> {
    detections.sort_by(|a, b| b.score.partial_cmp(&a.score).unwrap());
    let mut kept: Vec<Detection> = Vec::new();
    for det in detections {
        let suppressed = kept
            .iter()
            .any(|k| k.category == det.category && k.bbox.iou(&det.bbox) > iou);
        if !suppressed {
            kept.push(det);
        }
    }
    kept
}

fn logit(x: f64) -> f64 {
    let x = x.clamp(1e-6, 1.0 - 1e-6);
    (x / (1.0 - x)).ln()
}

fn boxes_from_logits(logits: &Array2<f64>) -> Vec<BoxSpec> {
    (0..logits.nrows())
        .map(|i| {
            let s = |j: usize| crate::scalar::sigmoid(logits[[i, j]]);
            BoxSpec {
                cx: s(0),
                cy: s(1),
                w: s(2),
                h: s(3),
            }
        })
        .collect()
}

/// Extract the box values of a tape node holding sigmoid box coordinates.
pub fn box_values(values: &Array2<f64>) -> Vec<BoxSpec> {
    (0..values.nrows())
        .map(|i| BoxSpec {
            cx: values[[i, 0]],
            cy: values[[i, 1]],
            w: values[[i, 2]],
            h: values[[i, 3]],
        })
        .collect()
}
