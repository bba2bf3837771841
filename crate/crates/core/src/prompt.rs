//! Visual prompt encoder: user boxes become positional queries that read
//! image features through deformable attention. The query set always ends
//! with one class-token query on the global box, which aggregates the box
//! prompts and serves as the category-level prompt downstream.

use ndarray::{Array1, Array2};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::boxes::BoxSpec;
use crate::error::{Error, Result};
use crate::layers::{Attention, DeformableRead};
use crate::nn::{Fwd, Linear, ParamGroup, ParamId, ParamStore, Var};

/// Single-scale feature grid, stored flattened row-major: cell (r, c) is
/// row `r * w + c` of `values`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureGrid {
    pub h: usize,
    pub w: usize,
    pub values: Array2<f64>,
}

impl FeatureGrid {
    pub fn new(h: usize, w: usize, values: Array2<f64>) -> Result<Self> {
        if values.nrows() != h * w {
            return Err(Error::DimMismatch {
                context: "feature grid",
                left: h * w,
                right: values.nrows(),
            });
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("feature grid".into()));
        }
        Ok(Self { h, w, values })
    }

    pub fn dim(&self) -> usize {
        self.values.ncols()
    }

    pub fn tokens(&self) -> usize {
        self.h * self.w
    }
}

/// Interleaved sine/cosine encoding of box coordinates at geometrically
/// spaced frequencies. Each of the four coordinates receives `dim / 4`
/// slots; half-turn scaling keeps the encoding injective on [0, 1].
pub fn sine_cosine_encoding(boxes: &[BoxSpec], dim: usize, base: f64) -> Result<Array2<f64>> {
    if dim % 8 != 0 {
        return Err(Error::Invalid {
            context: "box encoding",
            requirement: format!("dim must be divisible by 8, got {dim}"),
        });
    }
    let per_coord = dim / 4;
    let n_freq = per_coord / 2;
    let mut out = Array2::zeros((boxes.len(), dim));
    for (row, b) in boxes.iter().enumerate() {
        for (c, coord) in [b.cx, b.cy, b.w, b.h].into_iter().enumerate() {
            for i in 0..n_freq {
                let freq = base.powf(i as f64 / n_freq as f64);
                let angle = coord * std::f64::consts::PI / freq;
                out[[row, c * per_coord + 2 * i]] = angle.sin();
                out[[row, c * per_coord + 2 * i + 1]] = angle.cos();
            }
        }
    }
    Ok(out)
}

/// Default frequency base of the positional encoding.
pub const PE_BASE: f64 = 10000.0;

/// The K+1 queries entering the deformable extractor: K box queries plus
/// the trailing class-token query on the global box.
pub struct PromptQuerySet {
    pub queries: Var,
    pub boxes: Vec<BoxSpec>,
}

impl PromptQuerySet {
    pub fn count(&self) -> usize {
        self.boxes.len()
    }

    pub fn class_token_row(&self) -> usize {
        self.boxes.len() - 1
    }
}

/// Configuration of the visual prompt encoder.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptEncoderConfig {
    /// Model dimension (also the grid feature dimension).
    pub dim: usize,
    /// Content embedding width; concatenated with the box encoding.
    pub content_dim: usize,
    pub layers: usize,
    pub heads: usize,
    pub points: usize,
}

impl Default for PromptEncoderConfig {
    fn default() -> Self {
        Self {
            dim: 32,
            content_dim: 32,
            layers: 3,
            heads: 2,
            points: 4,
        }
    }
}

/// One encoder layer: a deformable read that replaces the query content,
/// then a residual self-attention pass so the class token can aggregate
/// the box prompts.
#[derive(Debug, Clone, Serialize, Deserialize)]
struct PromptLayer {
    read: DeformableRead,
    self_attn: Attention,
}

/// Visual prompt encoder.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PromptEncoder {
    pub config: PromptEncoderConfig,
    box_proj: Linear,
    content: ParamId,
    class_token: ParamId,
    query_proj: Linear,
    layers: Vec<PromptLayer>,
}

impl PromptEncoder {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        name: &str,
        config: PromptEncoderConfig,
    ) -> Self {
        let g = ParamGroup::Main;
        let box_proj = Linear::new(
            store,
            rng,
            &format!("{name}.box_proj"),
            g,
            config.dim,
            config.dim,
        );
        let content = store.add(
            &format!("{name}.content"),
            g,
            crate::nn::glorot(rng, 1, config.content_dim),
        );
        let class_token = store.add(
            &format!("{name}.class_token"),
            g,
            crate::nn::glorot(rng, 1, config.content_dim),
        );
        let query_proj = Linear::new(
            store,
            rng,
            &format!("{name}.query_proj"),
            g,
            config.content_dim + config.dim,
            config.dim,
        );
        let layers: Vec<PromptLayer> = (0..config.layers)
            .map(|l| PromptLayer {
                read: DeformableRead::new(
                    store,
                    rng,
                    &format!("{name}.layer{l}.read"),
                    g,
                    config.dim,
                    config.heads,
                    config.points,
                ),
                self_attn: Attention::new(
                    store,
                    rng,
                    &format!("{name}.layer{l}.self_attn"),
                    g,
                    config.dim,
                    config.heads,
                ),
            })
            .collect();
        // A small nonzero output projection lets the class token start
        // aggregating box prompts from the first step.
        for layer in &layers {
            *store.value_mut(layer.self_attn.wo.weight) =
                crate::nn::glorot(rng, config.dim, config.dim) * 0.3;
        }
        Self {
            config,
            box_proj,
            content,
            class_token,
            query_proj,
            layers,
        }
    }

    /// `B = Linear(PE(boxes))`.
    pub fn encode_boxes(&self, fwd: &mut Fwd, boxes: &[BoxSpec]) -> Result<Var> {
        let pe = sine_cosine_encoding(boxes, self.config.dim, PE_BASE)?;
        let pe = fwd.tape.leaf(pe);
        Ok(self.box_proj.forward(fwd, pe))
    }

    /// `Q = Linear(CAT([C; C'], [B; B']))`: replicated content rows over the
    /// box encodings, the class token over the global box, projected to
    /// model dimension.
    pub fn build_queries(&self, fwd: &mut Fwd, boxes: &[BoxSpec]) -> Result<PromptQuerySet> {
        if boxes.is_empty() {
            return Err(Error::EmptyInput("prompt boxes"));
        }
        let k = boxes.len();
        let mut all_boxes = boxes.to_vec();
        all_boxes.push(BoxSpec::global());

        let box_embed = self.encode_boxes(fwd, &all_boxes)?;
        let content = fwd.param(self.content);
        let class_token = fwd.param(self.class_token);
        let mut content_rows = Vec::with_capacity(k + 1);
        for _ in 0..k {
            content_rows.push(content);
        }
        content_rows.push(class_token);
        let content_stack = fwd.tape.concat_rows(&content_rows);
        let concat = fwd.tape.concat_cols(&[content_stack, box_embed]);
        let queries = self.query_proj.forward(fwd, concat);
        Ok(PromptQuerySet {
            queries,
            boxes: all_boxes,
        })
    }

    /// Run the deformable layers over a query set, returning K+1 prompt
    /// embeddings (class token last).
    pub fn extract(
        &self,
        fwd: &mut Fwd,
        queries: &PromptQuerySet,
        grid: Var,
        grid_h: usize,
        grid_w: usize,
    ) -> Var {
        let mut q = queries.queries;
        for layer in &self.layers {
            let read = layer.read.forward(fwd, q, &queries.boxes, grid, grid_h, grid_w);
            q = read.output;
            let update = layer.self_attn.forward(fwd, q, q, None);
            q = fwd.tape.add(q, update);
        }
        q
    }

    /// Full pipeline for one category: boxes in, K+1 prompts out.
    pub fn extract_prompts(
        &self,
        fwd: &mut Fwd,
        boxes: &[BoxSpec],
        grid: Var,
        grid_h: usize,
        grid_w: usize,
    ) -> Result<Var> {
        let queries = self.build_queries(fwd, boxes)?;
        Ok(self.extract(fwd, &queries, grid, grid_h, grid_w))
    }

    /// The class-token prompt: the row handed downstream as the category's
    /// visual prompt (it aggregates all the category's boxes in the image).
    pub fn extract_category_prompt(
        &self,
        fwd: &mut Fwd,
        boxes: &[BoxSpec],
        grid: Var,
        grid_h: usize,
        grid_w: usize,
    ) -> Result<Var> {
        let queries = self.build_queries(fwd, boxes)?;
        let prompts = self.extract(fwd, &queries, grid, grid_h, grid_w);
        Ok(fwd.tape.select_rows(prompts, &[queries.class_token_row()]))
    }

    /// Test/support access to internals for parameter surgery.
    pub fn parts(&self) -> (&Linear, ParamId, ParamId, &Linear) {
        (&self.box_proj, self.content, self.class_token, &self.query_proj)
    }

    pub fn layer_parts(&self, layer: usize) -> (&DeformableRead, &Attention) {
        (&self.layers[layer].read, &self.layers[layer].self_attn)
    }
}

/// Positional encoding of grid cell centers, reusing the box encoding with
/// each cell's box. Returned as (h*w) x dim, row-major cells.
pub fn grid_position_encoding(h: usize, w: usize, dim: usize) -> Result<Array2<f64>> {
    let mut boxes = Vec::with_capacity(h * w);
    for r in 0..h {
        for c in 0..w {
            boxes.push(BoxSpec::new(
                (c as f64 + 0.5) / w as f64,
                (r as f64 + 0.5) / h as f64,
                1.0 / w as f64,
                1.0 / h as f64,
            ));
        }
    }
    sine_cosine_encoding(&boxes, dim, PE_BASE)
}

/// Reference box of each grid token for the encoder's deformable
/// self-attention; wider than a cell so tokens see a neighborhood.
pub fn grid_token_boxes(h: usize, w: usize, reach: f64) -> Vec<BoxSpec> {
    let mut boxes = Vec::with_capacity(h * w);
    for r in 0..h {
        for c in 0..w {
            boxes.push(BoxSpec::new(
                (c as f64 + 0.5) / w as f64,
                (r as f64 + 0.5) / h as f64,
                reach,
                reach,
            ));
        }
    }
    boxes
}

impl PromptEncoder {
    /// Build an encoder whose value/output projections are identity and
    /// whose self-attention output is zeroed, so the extracted prompt is a
    /// pure bilinear read driven by box geometry. Used by verification
    /// fixtures.
    pub fn with_identity_transforms(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        name: &str,
        config: PromptEncoderConfig,
    ) -> Self {
        let enc = Self::new(store, rng, name, config);
        for layer in &enc.layers {
            *store.value_mut(layer.read.value_proj.weight) = Array2::eye(config.dim);
            *store.value_mut(layer.read.value_proj.bias) = Array2::zeros((1, config.dim));
            *store.value_mut(layer.read.output_proj.weight) = Array2::eye(config.dim);
            *store.value_mut(layer.read.output_proj.bias) = Array2::zeros((1, config.dim));
            *store.value_mut(layer.read.offset_head.weight) =
                Array2::zeros(store.value(layer.read.offset_head.weight).dim());
            *store.value_mut(layer.self_attn.wo.weight) =
                Array2::zeros((config.dim, config.dim));
        }
        enc
    }
}

/// Convenience: evaluate prompts outside any training context.
pub fn extract_prompts_pure(
    encoder: &PromptEncoder,
    store: &ParamStore,
    boxes: &[BoxSpec],
    grid: &Array2<f64>,
    grid_h: usize,
    grid_w: usize,
) -> Result<Array2<f64>> {
    let mut fwd = Fwd::new(store);
    let grid_var = fwd.tape.leaf(grid.clone());
    let out = encoder.extract_prompts(&mut fwd, boxes, grid_var, grid_h, grid_w)?;
    Ok(fwd.tape.value(out).clone())
}

/// One prompt row per call as a plain vector (class-token row).
pub fn extract_category_prompt_pure(
    encoder: &PromptEncoder,
    store: &ParamStore,
    boxes: &[BoxSpec],
    grid: &Array2<f64>,
    grid_h: usize,
    grid_w: usize,
) -> Result<Array1<f64>> {
    let all = extract_prompts_pure(encoder, store, boxes, grid, grid_h, grid_w)?;
    Ok(all.row(all.nrows() - 1).to_owned())
}

#[cfg(test)]
mod tests;
