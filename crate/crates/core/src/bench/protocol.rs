//! Evaluation protocols. Visual-G builds a generic bank offline by
//! averaging prompts from support scenes; Visual-I builds a per-image bank
//! from one randomly chosen ground-truth box per present category.

use ndarray::{Array1, Array2};
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;

use crate::bench::{evaluate_ap, ApReport, Detection, SyntheticScene};
use crate::error::{Error, Result};
use crate::integration::{integrate_prompts, PromptBank, PromptBatchEntry};
use crate::metrics::LabeledEmbeddings;
use crate::model::{FusionSettings, ToyDetector};
use crate::nn::{Fwd, ParamStore};

/// Class-token prompt of one category in one scene, from all its GT boxes.
pub fn extract_scene_category_prompt(
    model: &ToyDetector,
    store: &ParamStore,
    scene: &SyntheticScene,
    category: u32,
) -> Result<Array1<f64>> {
    let boxes = scene.boxes_of(category);
    if boxes.is_empty() {
        return Err(Error::NoSupport(category.to_string()));
    }
    let mut fwd = Fwd::new(store);
    let feats = model.backbone_features(&mut fwd, &scene.grid);
    let prompt = model.prompt_encoder.extract_category_prompt(
        &mut fwd,
        &boxes,
        feats,
        scene.grid.h,
        scene.grid.w,
    )?;
    Ok(fwd.tape.value(prompt).row(0).to_owned())
}

/// Class-token prompt from one specific box.
pub fn extract_box_prompt(
    model: &ToyDetector,
    store: &ParamStore,
    scene: &SyntheticScene,
    bx: crate::boxes::BoxSpec,
) -> Result<Array1<f64>> {
    let mut fwd = Fwd::new(store);
    let feats = model.backbone_features(&mut fwd, &scene.grid);
    let prompt = model.prompt_encoder.extract_category_prompt(
        &mut fwd,
        &[bx],
        feats,
        scene.grid.h,
        scene.grid.w,
    )?;
    Ok(fwd.tape.value(prompt).row(0).to_owned())
}

/// Generic-prompt bank: for every category, sample up to `n_per_class`
/// support scenes containing it (seeded), extract its prompt from each,
/// and average. Every category must have at least one support scene.
pub fn visual_g_prompts(
    model: &ToyDetector,
    store: &ParamStore,
    categories: &[u32],
    support: &[SyntheticScene],
    n_per_class: usize,
    seed: u64,
) -> Result<PromptBank<f64, u32>> {
    let mut missing = Vec::new();
    let mut entries = Vec::new();
    for &cat in categories {
        let mut candidates: Vec<usize> = (0..support.len())
            .filter(|&i| support[i].categories().contains(&cat))
            .collect();
        if candidates.is_empty() {
            missing.push(cat.to_string());
            continue;
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (cat as u64).wrapping_mul(0x2545_f491));
        candidates.shuffle(&mut rng);
        for &scene_idx in candidates.iter().take(n_per_class) {
            let prompt =
                extract_scene_category_prompt(model, store, &support[scene_idx], cat)?;
            entries.push(PromptBatchEntry::new(prompt, cat, scene_idx)?);
        }
    }
    if !missing.is_empty() {
        return Err(Error::NoSupport(missing.join(", ")));
    }
    integrate_prompts(&entries)
}

/// Interactive-prompt bank: exactly the categories present in the scene,
/// one prompt each from one seeded-random GT box.
pub fn visual_i_prompts(
    model: &ToyDetector,
    store: &ParamStore,
    scene: &SyntheticScene,
    seed: u64,
) -> Result<PromptBank<f64, u32>> {
    if scene.instances.is_empty() {
        return Err(Error::EmptyInput("scene instances"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ scene.seed.rotate_left(17));
    let mut entries = Vec::new();
    for cat in scene.categories() {
        let boxes = scene.boxes_of(cat);
        let bx = boxes[rng.gen_range(0..boxes.len())];
        let prompt = extract_box_prompt(model, store, scene, bx)?;
        entries.push(PromptBatchEntry::new(prompt, cat, 0)?);
    }
    integrate_prompts(&entries)
}

/// Run detection over scenes with a fixed bank and score against the
/// ground truths.
pub fn evaluate_bank(
    model: &ToyDetector,
    store: &ParamStore,
    scenes: &[SyntheticScene],
    bank: &PromptBank<f64, u32>,
    fusion: FusionSettings,
) -> Result<(ApReport, Vec<Vec<Detection>>)> {
    let matrix = crate::integration::bank_as_classifier(bank)?;
    let labels = bank.labels().to_vec();
    let mut detections = Vec::with_capacity(scenes.len());
    for scene in scenes {
        detections.push(model.detect(
            store,
            &scene.grid,
            matrix.values(),
            &labels,
            fusion,
        ));
    }
    let gts: Vec<Vec<(crate::boxes::BoxSpec, u32)>> =
        scenes.iter().map(|s| s.instances.clone()).collect();
    Ok((evaluate_ap(&detections, &gts, 0.5), detections))
}

/// Visual-I evaluation: a fresh per-scene bank restricted to the present
/// categories, detections pooled across scenes for AP.
pub fn evaluate_visual_i(
    model: &ToyDetector,
    store: &ParamStore,
    scenes: &[SyntheticScene],
    seed: u64,
    fusion: FusionSettings,
) -> Result<ApReport> {
    let mut detections = Vec::with_capacity(scenes.len());
    for scene in scenes {
        let bank = visual_i_prompts(model, store, scene, seed)?;
        let matrix = crate::integration::bank_as_classifier(&bank)?;
        detections.push(model.detect(
            store,
            &scene.grid,
            matrix.values(),
            bank.labels(),
            fusion,
        ));
    }
    let gts: Vec<Vec<(crate::boxes::BoxSpec, u32)>> =
        scenes.iter().map(|s| s.instances.clone()).collect();
    Ok(evaluate_ap(&detections, &gts, 0.5))
}

/// Labeled per-scene category prompts across a corpus, for the embedding
/// diagnostics. Categories are capped at `max_per_class` prompts in corpus
/// order.
pub fn collect_labeled_prompts(
    model: &ToyDetector,
    store: &ParamStore,
    scenes: &[SyntheticScene],
    max_per_class: usize,
) -> Result<LabeledEmbeddings<f64, u32>> {
    let mut rows: Vec<Vec<f64>> = Vec::new();
    let mut labels: Vec<u32> = Vec::new();
    let mut counts: std::collections::BTreeMap<u32, usize> = Default::default();
    for scene in scenes {
        for cat in scene.categories() {
            let seen = counts.entry(cat).or_insert(0);
            if *seen >= max_per_class {
                continue;
            }
            *seen += 1;
            let prompt = extract_scene_category_prompt(model, store, scene, cat)?;
            rows.push(prompt.to_vec());
            labels.push(cat);
        }
    }
    // Only categories with at least two prompts are usable downstream.
    let keep: Vec<usize> = (0..labels.len())
        .filter(|&i| labels.iter().filter(|&&l| l == labels[i]).count() >= 2)
        .collect();
    let rows: Vec<Vec<f64>> = keep.iter().map(|&i| rows[i].clone()).collect();
    let labels: Vec<u32> = keep.iter().map(|&i| labels[i]).collect();
    if rows.is_empty() {
        return Err(Error::EmptyInput("labeled prompts"));
    }
    LabeledEmbeddings::new(crate::embedding::EmbeddingMatrix::from_rows(&rows)?, labels)
}

/// Bank matrix restricted to a label subset, preserving the given order.
pub fn restricted_bank_matrix(
    bank: &PromptBank<f64, u32>,
    labels: &[u32],
) -> Result<(Array2<f64>, Vec<u32>)> {
    let sub = bank.restrict(&labels.to_vec())?;
    let matrix = crate::integration::bank_as_classifier(&sub)?;
    Ok((matrix.values().clone(), labels.to_vec()))
}
