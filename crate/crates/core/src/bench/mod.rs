//! Synthetic detection benchmark: a category space with hierarchical text
//! structure, scenes with planted instances, matching, AP evaluation, the
//! evaluation protocols, and the training step.

pub mod ap;
pub mod hungarian;
pub mod protocol;
pub mod train;

pub use ap::{evaluate_ap, ApReport, Detection};
pub use hungarian::{assign_min_cost, hungarian_match, Assignment, QueryPrediction};

use ndarray::{Array1, Array2};
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::boxes::BoxSpec;
use crate::embedding::EmbeddingMatrix;
use crate::error::{Error, Result};
use crate::losses::TextMatrix;
use crate::prompt::FeatureGrid;

/// Standard normal via Box-Muller, driven by the deterministic stream.
fn normal(rng: &mut ChaCha8Rng) -> f64 {
    let u1: f64 = rng.gen_range(f64::EPSILON..1.0);
    let u2: f64 = rng.gen_range(0.0..1.0);
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

fn random_unit(rng: &mut ChaCha8Rng, dim: usize) -> Array1<f64> {
    loop {
        let v = Array1::from_shape_fn(dim, |_| normal(rng));
        let norm = v.dot(&v).sqrt();
        if norm > 1e-6 {
            return v / norm;
        }
    }
}

/// Parameters of the category space.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CategorySpaceConfig {
    pub k: usize,
    pub dim: usize,
    pub groups: usize,
    pub seed: u64,
    /// Spread of category texts around their group anchor.
    pub text_spread: f64,
    /// Magnitude of the category-specific offset separating the visual
    /// prototypes from rotated text embeddings.
    pub visual_offset: f64,
    /// Weight of the component shared by all group anchors; nonzero values
    /// keep cross-group text similarity positive, as language embeddings
    /// of related concept families are.
    pub anchor_correlation: f64,
    /// Number of synonym pairs: same-group category pairs whose visual
    /// prototypes are nearly identical while their texts stay distinct,
    /// like co-occurring labels for one visual concept in grounding data.
    pub synonym_pairs: usize,
}

impl Default for CategorySpaceConfig {
    fn default() -> Self {
        Self {
            k: 12,
            dim: 32,
            groups: 4,
            seed: 0,
            text_spread: 0.35,
            visual_offset: 0.7,
            anchor_correlation: 2.0,
            synonym_pairs: 2,
        }
    }
}

/// Category universe: hierarchical unit-norm text embeddings and related
/// (rotated + offset) visual prototypes.
#[derive(Debug, Clone)]
pub struct CategorySpace {
    pub config: CategorySpaceConfig,
    /// category -> super-group id
    pub hierarchy: Vec<usize>,
    pub text: TextMatrix<f64>,
    pub visual_prototypes: Array2<f64>,
}

impl CategorySpace {
    pub fn k(&self) -> usize {
        self.config.k
    }

    pub fn dim(&self) -> usize {
        self.config.dim
    }

    /// Text rows for a list of category ids (rows repeat with the ids).
    pub fn text_rows_for(&self, categories: &[u32]) -> Result<TextMatrix<f64>> {
        let rows: Vec<Vec<f64>> = categories
            .iter()
            .map(|&c| self.text.matrix().row(c as usize).to_vec())
            .collect();
        TextMatrix::new(EmbeddingMatrix::from_rows(&rows)?)
    }
}

/// Deterministic category space with verified group structure: within-group
/// text similarity strictly dominates cross-group similarity. Regenerates
/// from follow-on seeds if a draw violates the constraint.
pub fn generate_category_space(config: &CategorySpaceConfig) -> Result<CategorySpace> {
    if config.k < 2 || config.dim < 8 || config.groups < 1 {
        return Err(Error::Invalid {
            context: "category space",
            requirement: "needs k >= 2, dim >= 8, groups >= 1".into(),
        });
    }
    if config.k < config.groups {
        return Err(Error::Invalid {
            context: "category space",
            requirement: format!("k={} must be >= groups={}", config.k, config.groups),
        });
    }
    for attempt in 0..50 {
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed.wrapping_add(attempt * 0x9e37));
        let hierarchy: Vec<usize> = (0..config.k)
            .map(|c| c * config.groups / config.k)
            .collect();
        let shared = random_unit(&mut rng, config.dim);
        let anchors: Vec<Array1<f64>> = (0..config.groups)
            .map(|_| {
                let own = random_unit(&mut rng, config.dim);
                let raw = &shared * config.anchor_correlation + &own;
                let norm = raw.dot(&raw).sqrt();
                raw / norm
            })
            .collect();
        let mut text_rows = Array2::zeros((config.k, config.dim));
        for c in 0..config.k {
            let noise = Array1::from_shape_fn(config.dim, |_| {
                normal(&mut rng) * config.text_spread / (config.dim as f64).sqrt()
            });
            let raw = &anchors[hierarchy[c]] + &noise;
            let norm = raw.dot(&raw).sqrt();
            text_rows.row_mut(c).assign(&(raw / norm));
        }

        if group_structure_ok(&text_rows, &hierarchy) {
            // Fixed random rotation (Gram-Schmidt of a random matrix) plus
            // per-category offsets: related to the text space, not equal.
            let rotation = random_rotation(&mut rng, config.dim);
            let mut prototypes = Array2::zeros((config.k, config.dim));
            for c in 0..config.k {
                let rotated = rotation.dot(&text_rows.row(c).to_owned());
                let offset = Array1::from_shape_fn(config.dim, |_| {
                    normal(&mut rng) * config.visual_offset / (config.dim as f64).sqrt()
                });
                let raw = rotated + offset;
                let norm = raw.dot(&raw).sqrt();
                prototypes.row_mut(c).assign(&(raw / norm));
            }
            // Synonym pairs: the second member of each pair reuses the
            // first member's visual prototype up to a slight perturbation,
            // while keeping its own text row. Pairs sit inside a group.
            for (first, second) in synonym_pair_indices(config.k, config.groups, config.synonym_pairs)
            {
                let base = prototypes.row(first).to_owned();
                let jitter = Array1::from_shape_fn(config.dim, |_| {
                    normal(&mut rng) * 0.12 / (config.dim as f64).sqrt()
                });
                let raw = base + jitter;
                let norm = raw.dot(&raw).sqrt();
                prototypes.row_mut(second).assign(&(raw / norm));
            }
            return Ok(CategorySpace {
                config: *config,
                hierarchy,
                text: TextMatrix::new(EmbeddingMatrix::new(text_rows)?)?,
                visual_prototypes: prototypes,
            });
        }
    }
    Err(Error::Invalid {
        context: "category space",
        requirement: "could not satisfy group-structure constraint in 50 draws".into(),
    })
}

/// Synonym pairs are the first two members of evenly spaced groups, so each
/// pair shares a group by construction.
pub fn synonym_pair_indices(k: usize, groups: usize, pairs: usize) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    let group_size = k / groups.max(1);
    if group_size < 2 {
        return out;
    }
    for p in 0..pairs {
        let group = (p * groups.max(1)) / pairs.max(1);
        let first = group * group_size;
        let second = first + 1;
        if second < k && !out.iter().any(|&(a, b)| b == second || a == first) {
            out.push((first, second));
        }
    }
    out
}

fn group_structure_ok(text: &Array2<f64>, hierarchy: &[usize]) -> bool {
    let k = text.nrows();
    let mut min_within = f64::INFINITY;
    let mut max_cross = f64::NEG_INFINITY;
    let mut has_within = false;
    for i in 0..k {
        for j in 0..i {
            let cos = text.row(i).dot(&text.row(j));
            if hierarchy[i] == hierarchy[j] {
                has_within = true;
                min_within = min_within.min(cos);
            } else {
                max_cross = max_cross.max(cos);
            }
        }
    }
    !has_within || max_cross == f64::NEG_INFINITY || min_within > max_cross
}

fn random_rotation(rng: &mut ChaCha8Rng, dim: usize) -> Array2<f64> {
    // Gram-Schmidt orthonormalization of a random Gaussian matrix.
    let mut basis: Vec<Array1<f64>> = Vec::with_capacity(dim);
    while basis.len() < dim {
        let mut v = Array1::from_shape_fn(dim, |_| normal(rng));
        for b in &basis {
            let proj = v.dot(b);
            v = v - b * proj;
        }
        let norm = v.dot(&v).sqrt();
        if norm > 1e-8 {
            basis.push(v / norm);
        }
    }
    let mut rotation = Array2::zeros((dim, dim));
    for (i, b) in basis.iter().enumerate() {
        rotation.row_mut(i).assign(b);
    }
    rotation
}

/// Parameters of scene generation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SceneConfig {
    pub grid_h: usize,
    pub grid_w: usize,
    pub max_instances: usize,
    /// Per-instance appearance noise (one draw per instance).
    pub sigma_inst: f64,
    /// Per-cell nuisance noise; background cells carry only this.
    pub sigma_scene: f64,
    pub min_box: f64,
    pub max_box: f64,
    /// Pairwise IoU cap enforced by rejection sampling.
    pub iou_cap: f64,
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self {
            grid_h: 16,
            grid_w: 16,
            max_instances: 4,
            sigma_inst: 0.10,
            sigma_scene: 0.03,
            min_box: 0.2,
            max_box: 0.4,
            iou_cap: 0.3,
        }
    }
}

/// A generated scene: the feature grid and its ground-truth instances.
#[derive(Debug, Clone)]
pub struct SyntheticScene {
    pub grid: FeatureGrid,
    pub instances: Vec<(BoxSpec, u32)>,
    pub seed: u64,
}

impl SyntheticScene {
    pub fn categories(&self) -> Vec<u32> {
        let mut out = Vec::new();
        for (_, c) in &self.instances {
            if !out.contains(c) {
                out.push(*c);
            }
        }
        out
    }

    pub fn boxes_of(&self, category: u32) -> Vec<BoxSpec> {
        self.instances
            .iter()
            .filter(|(_, c)| *c == category)
            .map(|(b, _)| *b)
            .collect()
    }
}

/// Deterministic scene from (space, seed): instances placed by rejection
/// sampling under the IoU cap, grid cells inside an instance receive the
/// category prototype plus noise, background cells receive pure noise.
pub fn generate_scene(
    space: &CategorySpace,
    config: &SceneConfig,
    seed: u64,
) -> Result<SyntheticScene> {
    if config.max_instances < 1 {
        return Err(Error::Invalid {
            context: "scene",
            requirement: "max_instances >= 1".into(),
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let wanted = rng.gen_range(1..=config.max_instances);
    let mut instances: Vec<(BoxSpec, u32)> = Vec::new();
    for _ in 0..wanted {
        let mut placed = false;
        for _attempt in 0..100 {
            let w = rng.gen_range(config.min_box..config.max_box);
            let h = rng.gen_range(config.min_box..config.max_box);
            let bx = BoxSpec::new(rng.gen_range(0.0..1.0), rng.gen_range(0.0..1.0), w, h);
            if instances.iter().all(|(b, _)| b.iou(&bx) <= config.iou_cap) {
                let cat = rng.gen_range(0..space.k()) as u32;
                instances.push((bx, cat));
                placed = true;
                break;
            }
        }
        if !placed {
            break; // emit with fewer instances
        }
    }

    let dim = space.dim();
    let (gh, gw) = (config.grid_h, config.grid_w);
    let mut values = Array2::zeros((gh * gw, dim));
    // Per-cell nuisance everywhere; backgrounds carry only this.
    for v in values.iter_mut() {
        *v = normal(&mut rng) * config.sigma_scene;
    }
    for (bx, cat) in &instances {
        let inst_noise =
            Array1::from_shape_fn(dim, |_| normal(&mut rng) * config.sigma_inst);
        let signal = &space.visual_prototypes.row(*cat as usize).to_owned() + &inst_noise;
        let corners = bx.corners();
        for r in 0..gh {
            for c in 0..gw {
                let cx = (c as f64 + 0.5) / gw as f64;
                let cy = (r as f64 + 0.5) / gh as f64;
                if cx >= corners[0] && cx <= corners[2] && cy >= corners[1] && cy <= corners[3]
                {
                    let mut row = values.row_mut(r * gw + c);
                    row += &signal;
                }
            }
        }
    }
    Ok(SyntheticScene {
        grid: FeatureGrid::new(gh, gw, values)?,
        instances,
        seed,
    })
}

/// Deterministic per-split scene seeds derived from a master seed.
pub fn split_seeds(master: u64, split: &str, count: usize) -> Vec<u64> {
    let tag: u64 = split
        .bytes()
        .fold(0xcbf2_9ce4_8422_2325, |h: u64, b| {
            (h ^ b as u64).wrapping_mul(0x1000_0000_01b3)
        });
    (0..count as u64)
        .map(|i| master.wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ tag.wrapping_add(i))
        .collect()
}

/// Generate a corpus of scenes from explicit seeds.
pub fn generate_corpus(
    space: &CategorySpace,
    config: &SceneConfig,
    seeds: &[u64],
) -> Result<Vec<SyntheticScene>> {
    seeds
        .iter()
        .map(|&s| generate_scene(space, config, s))
        .collect()
}
