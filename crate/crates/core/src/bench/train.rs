//! One optimizer step: extract GT-box prompts, build the (optionally
//! batch-integrated) classifier bank, run every scene through the
//! detector, match, and backpropagate all enabled losses at every decoder
//! layer.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::bench::hungarian::{hungarian_match, QueryPrediction};
use crate::bench::SyntheticScene;
use crate::bench::CategorySpace;
use crate::error::{Error, Result};
use crate::losses::{
    box_regression_loss_with_grad, focal_loss_with_grad, prompt_to_text_alignment_with_grad,
    relation_distillation_loss_with_grad, supervised_contrastive_loss_with_grad, FocalParams,
    LossWeights, Temperatures,
};
use crate::model::{FusionSettings, ForwardOut, ToyDetector};
use crate::nn::{Adam, Fwd, ParamStore, Var};

/// Loss and strategy switches of one training run.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainSettings {
    pub weights: LossWeights,
    pub focal: FocalParams,
    pub temps: Temperatures,
    /// Temperature of the alignment InfoNCE.
    pub align_tau: f64,
    pub align: bool,
    pub distill: bool,
    /// Replace the distillation term with the supervised contrastive loss.
    pub scl_instead_of_distill: bool,
    /// Integrate prompts across the batch; off means the per-image bank
    /// ("current image prompt, current image detect").
    pub global_integration: bool,
    pub fusion: FusionSettings,
    /// Weight of the gating branch's focal loss.
    pub aux_weight: f64,
    /// Weight of the encoder token classification loss.
    pub enc_cls_weight: f64,
}

impl Default for TrainSettings {
    fn default() -> Self {
        Self {
            weights: LossWeights::default(),
            focal: FocalParams::default(),
            temps: Temperatures::default(),
            align_tau: 0.07,
            align: false,
            distill: false,
            scl_instead_of_distill: false,
            global_integration: false,
            fusion: FusionSettings::none(),
            aux_weight: 1.0,
            enc_cls_weight: 1.0,
        }
    }
}

/// Per-part loss values of one step (unweighted parts plus weighted total).
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub cls: f64,
    pub l1: f64,
    pub giou: f64,
    pub align: f64,
    pub distill: f64,
    pub aux: f64,
    pub enc_cls: f64,
    pub total: f64,
}

struct PromptInstance {
    var: Var,
    label: u32,
}

/// Seeds, loss values, and per-scene classification losses of one batch.
struct BatchAccumulation {
    seeds: Vec<(Var, Array2<f64>)>,
    breakdown: LossBreakdown,
    per_scene_cls: Vec<f64>,
}

/// One full training step over a batch of scenes. Applies the optimizer
/// and returns the loss breakdown. Aborts with a numeric error (naming the
/// step) if any loss part goes non-finite.
pub fn train_step(
    model: &ToyDetector,
    store: &mut ParamStore,
    optimizer: &mut Adam,
    scenes: &[&SyntheticScene],
    space: &CategorySpace,
    settings: &TrainSettings,
    step: usize,
) -> Result<LossBreakdown> {
    let (breakdown, param_grads) = {
        let mut fwd = Fwd::new(store);
        let acc = accumulate_batch(model, &mut fwd, scenes, space, settings)?;
        if !acc.breakdown.total.is_finite() {
            return Err(Error::NumericAbort {
                step,
                what: format!("{:?}", acc.breakdown),
            });
        }
        let grads = fwd.tape.backward(&acc.seeds);
        let param_grads = fwd.param_grads(&grads);
        (acc.breakdown, param_grads)
    };
    for (id, grad) in &param_grads {
        if grad.iter().any(|g| !g.is_finite()) {
            return Err(Error::NumericAbort {
                step,
                what: format!("gradient of {}", store.name(*id)),
            });
        }
    }
    optimizer.apply(store, &param_grads);
    Ok(breakdown)
}

/// Forward-only loss evaluation of a batch: the breakdown plus each
/// scene's own classification loss (summed over decoder layers). No
/// parameters are touched.
pub fn evaluate_batch_losses(
    model: &ToyDetector,
    store: &ParamStore,
    scenes: &[&SyntheticScene],
    space: &CategorySpace,
    settings: &TrainSettings,
) -> Result<(LossBreakdown, Vec<f64>)> {
    let mut fwd = Fwd::new(store);
    let acc = accumulate_batch(model, &mut fwd, scenes, space, settings)?;
    Ok((acc.breakdown, acc.per_scene_cls))
}

fn accumulate_batch(
    model: &ToyDetector,
    fwd: &mut Fwd,
    scenes: &[&SyntheticScene],
    space: &CategorySpace,
    settings: &TrainSettings,
) -> Result<BatchAccumulation> {
    if scenes.is_empty() {
        return Err(Error::EmptyInput("training batch"));
    }
    let batch = scenes.len() as f64;

    // Backbone features and per-(scene, category) class-token prompts.
    let mut features = Vec::with_capacity(scenes.len());
    let mut instances: Vec<PromptInstance> = Vec::new();
    let mut per_scene_labels: Vec<Vec<u32>> = Vec::new();
    for scene in scenes {
        let feats = model.backbone_features(fwd, &scene.grid);
        features.push(feats);
        let cats = scene.categories();
        for &cat in &cats {
            let prompt = model.prompt_encoder.extract_category_prompt(
                fwd,
                &scene.boxes_of(cat),
                feats,
                scene.grid.h,
                scene.grid.w,
            )?;
            instances.push(PromptInstance {
                var: prompt,
                label: cat,
            });
        }
        per_scene_labels.push(cats);
    }

    // Classifier bank(s): batch-integrated prototypes or per-image prompts.
    let batch_labels: Vec<u32> = {
        let mut out = Vec::new();
        for inst in &instances {
            if !out.contains(&inst.label) {
                out.push(inst.label);
            }
        }
        out
    };
    let prototype_for = |fwd: &mut Fwd, label: u32, members: Vec<Var>| -> Var {
        if members.len() == 1 {
            members[0]
        } else {
            let stacked = fwd.tape.concat_rows(&members);
            let _ = label;
            fwd.tape.mean_rows(stacked)
        }
    };
    let (scene_banks, scene_bank_labels): (Vec<Var>, Vec<Vec<u32>>) =
        if settings.global_integration {
            let mut prototypes = Vec::with_capacity(batch_labels.len());
            for &label in &batch_labels {
                let members: Vec<Var> = instances
                    .iter()
                    .filter(|inst| inst.label == label)
                    .map(|inst| inst.var)
                    .collect();
                prototypes.push(prototype_for(fwd, label, members));
            }
            let bank = fwd.tape.concat_rows(&prototypes);
            (
                vec![bank; scenes.len()],
                vec![batch_labels.clone(); scenes.len()],
            )
        } else {
            let mut banks = Vec::with_capacity(scenes.len());
            let mut labels = Vec::with_capacity(scenes.len());
            let mut cursor = 0usize;
            for cats in &per_scene_labels {
                let members: Vec<Var> = instances[cursor..cursor + cats.len()]
                    .iter()
                    .map(|inst| inst.var)
                    .collect();
               let bank = fwd.tape.concat_rows(&members);
                banks.push(bank);
                labels.push(cats.clone());
                cursor += cats.len();
            }
            (banks, labels)
        };

    // Forward every scene and accumulate loss seeds.
    let mut seeds: Vec<(Var, Array2<f64>)> = Vec::new();
    let mut breakdown = LossBreakdown::default();
    let mut per_scene_cls = vec![0.0_f64; scenes.len()];
    for (scene_idx, scene) in scenes.iter().enumerate() {
        let bank = scene_banks[scene_idx];
        let labels = &scene_bank_labels[scene_idx];
        let out: ForwardOut = model.forward_from_features(
            fwd,
            features[scene_idx],
            scene.grid.h,
            scene.grid.w,
            bank,
            settings.fusion,
        );

        // Encoder token supervision: a token is positive for the category
        // of any ground-truth box containing its cell center.
        let enc_values = fwd.tape.value(out.enc_scores).clone();
        let enc_targets = token_targets(scene, labels, scene.grid.h, scene.grid.w);
        let (enc_loss, enc_grad) =
            focal_loss_with_grad(&enc_values, &enc_targets, &settings.focal)?;
        breakdown.enc_cls += enc_loss / batch;
        seeds.push((
            out.enc_scores,
            enc_grad.mapv(|g| g * settings.enc_cls_weight / batch),
        ));

        // Gating-branch supervision against per-image category presence.
        for aux in &out.aux_maxes {
            let aux_values = fwd.tape.value(*aux).clone();
            let presence = Array2::from_shape_fn((1, labels.len()), |(_, j)| {
                scene.categories().contains(&labels[j])
            });
            let (aux_loss, aux_grad) =
                focal_loss_with_grad(&aux_values, &presence, &settings.focal)?;
            breakdown.aux += aux_loss / batch;
            seeds.push((*aux, aux_grad.mapv(|g| g * settings.aux_weight / batch)));
        }

        // Per-decoder-layer matching and detection losses.
        let gts: Vec<(crate::boxes::BoxSpec, usize)> = scene
            .instances
            .iter()
            .filter_map(|(b, c)| labels.iter().position(|l| l == c).map(|idx| (*b, idx)))
            .collect();
        for (layer, score_var) in out.layer_scores.iter().enumerate() {
            let score_values = fwd.tape.value(*score_var).clone();
            let boxes = &out.layer_box_values[layer];
            let predictions: Vec<QueryPrediction> = boxes
                .iter()
                .enumerate()
                .map(|(q, b)| QueryPrediction {
                    bbox: *b,
                    scores: score_values.row(q).to_vec(),
                })
                .collect();
            let assignment =
                hungarian_match(&predictions, &gts, &settings.weights, &settings.focal);

            let mut targets = Array2::from_elem(score_values.dim(), false);
            let mut matched_pred = Vec::new();
            let mut matched_gt = Vec::new();
            let mut matched_rows = Vec::new();
            for &(q, g) in &assignment.pairs {
                targets[[q, gts[g].1]] = true;
                matched_pred.push(boxes[q]);
                matched_gt.push(gts[g].0);
                matched_rows.push(q);
            }

            let (cls_loss, cls_grad) =
                focal_loss_with_grad(&score_values, &targets, &settings.focal)?;
            breakdown.cls += cls_loss / batch;
            per_scene_cls[scene_idx] += cls_loss;
            seeds.push((
                *score_var,
                cls_grad.mapv(|g| g * settings.weights.lambda_cls / batch),
            ));

            if !matched_rows.is_empty() {
                let (l1, giou_loss, l1_grads, giou_grads) =
                    box_regression_loss_with_grad(&matched_pred, &matched_gt)?;
                breakdown.l1 += l1 / batch;
                breakdown.giou += giou_loss / batch;
                let mut box_seed = Array2::zeros((boxes.len(), 4));
                for (slot, &q) in matched_rows.iter().enumerate() {
                    for j in 0..4 {
                        box_seed[[q, j]] = (settings.weights.lambda_l1 * l1_grads[slot][j]
                            + settings.weights.lambda_giou * giou_grads[slot][j])
                            / batch;
                    }
                }
                seeds.push((out.layer_boxes[layer], box_seed));
            }
        }
    }

    // Batch-level prompt-space losses, all on the per-(scene, category)
    // aggregated prompts: the alignment anchors each one to its category
    // text, distillation transfers the text relation structure, and the
    // contrastive substitute needs same-category pairs.
    if !instances.is_empty()
        && (settings.align || settings.distill || settings.scl_instead_of_distill)
    {
        let prompt_vars: Vec<Var> = instances.iter().map(|i| i.var).collect();
        let prompt_matrix = fwd.tape.concat_rows(&prompt_vars);
        let labels: Vec<u32> = instances.iter().map(|i| i.label).collect();
        let prompt_values = fwd.tape.value(prompt_matrix).clone();

        if settings.align {
            let unique = batch_labels.clone();
            let texts = space.text_rows_for(&unique)?;
            let label_indices: Vec<usize> = labels
                .iter()
                .map(|l| unique.iter().position(|u| u == l).unwrap())
                .collect();
            let (align_loss, align_grad) = prompt_to_text_alignment_with_grad(
                &prompt_values,
                &texts,
                &label_indices,
                settings.align_tau,
            )?;
            breakdown.align = align_loss;
            seeds.push((
                prompt_matrix,
                align_grad.mapv(|g| g * settings.weights.lambda_align),
            ));
        }

        if settings.distill && labels.len() >= 2 {
            let texts = space.text_rows_for(&labels)?;
            let (distill_loss, distill_grad) =
                relation_distillation_loss_with_grad(&prompt_values, &texts, &settings.temps)?;
            breakdown.distill = distill_loss;
            seeds.push((
                prompt_matrix,
                distill_grad.mapv(|g| g * settings.weights.lambda_distill),
            ));
        } else if settings.scl_instead_of_distill {
            // The anchor sum is averaged so the substitute's weight stays
            // comparable to the row-averaged distillation loss.
            let (scl_loss, scl_grad, _all_unique) = supervised_contrastive_loss_with_grad(
                &prompt_values,
                &labels,
                settings.temps.tau_v,
            )?;
            let anchors = labels.len() as f64;
            breakdown.distill = scl_loss / anchors;
            seeds.push((
                prompt_matrix,
                scl_grad.mapv(|g| g * settings.weights.lambda_distill / anchors),
            ));
        }
    }

    breakdown.total = settings.weights.lambda_cls * breakdown.cls
        + settings.weights.lambda_l1 * breakdown.l1
        + settings.weights.lambda_giou * breakdown.giou
        + settings.weights.lambda_align * breakdown.align
        + settings.weights.lambda_distill * breakdown.distill
        + settings.aux_weight * breakdown.aux
        + settings.enc_cls_weight * breakdown.enc_cls;

    Ok(BatchAccumulation {
        seeds,
        breakdown,
        per_scene_cls,
    })
}

fn token_targets(
    scene: &SyntheticScene,
    bank_labels: &[u32],
    grid_h: usize,
    grid_w: usize,
) -> Array2<bool> {
    let mut targets = Array2::from_elem((grid_h * grid_w, bank_labels.len()), false);
    for (bx, cat) in &scene.instances {
        let Some(col) = bank_labels.iter().position(|l| l == cat) else {
            continue;
        };
        let corners = bx.corners();
        for r in 0..grid_h {
            for c in 0..grid_w {
                let cx = (c as f64 + 0.5) / grid_w as f64;
                let cy = (r as f64 + 0.5) / grid_h as f64;
                if cx >= corners[0] && cx <= corners[2] && cy >= corners[1] && cy <= corners[3]
                {
                    targets[[r * grid_w + c, col]] = true;
                }
            }
        }
    }
    targets
}
