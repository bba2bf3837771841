//! Attention building blocks on the autodiff tape: standard scaled
//! dot-product attention (optionally gated) and the deformable read used by
//! the prompt encoder, the image encoder, and the box decoder.

use ndarray::Array2;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::boxes::BoxSpec;
use crate::nn::{Fwd, Linear, ParamGroup, ParamStore, Var};

/// Multi-head scaled dot-product attention with projections. The output
/// projection starts at zero so a fresh layer is the identity inside a
/// residual block. An optional gate row is added to every query's key
/// logits before the 1/sqrt(d) scaling.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Attention {
    pub wq: Linear,
    pub wk: Linear,
    pub wv: Linear,
    pub wo: Linear,
    pub heads: usize,
    pub dim: usize,
}

impl Attention {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        name: &str,
        group: ParamGroup,
        dim: usize,
        heads: usize,
    ) -> Self {
        assert!(dim % heads == 0, "dim must divide into heads");
        Self {
            wq: Linear::new(store, rng, &format!("{name}.wq"), group, dim, dim),
            wk: Linear::new(store, rng, &format!("{name}.wk"), group, dim, dim),
            wv: Linear::new(store, rng, &format!("{name}.wv"), group, dim, dim),
            wo: Linear::new_zeroed(store, &format!("{name}.wo"), group, dim, dim),
            heads,
            dim,
        }
    }

    /// Attention update for `queries` reading from `keys_values`; the caller
    /// adds the residual. `gate` is a 1 x M row broadcast onto the logits.
    pub fn forward(&self, fwd: &mut Fwd, queries: Var, keys_values: Var, gate: Option<Var>) -> Var {
        let q = self.wq.forward(fwd, queries);
        let k = self.wk.forward(fwd, keys_values);
        let v = self.wv.forward(fwd, keys_values);
        let head_dim = self.dim / self.heads;
        let scale = 1.0 / (head_dim as f64).sqrt();
        let mut heads = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let qh = fwd.tape.slice_cols(q, h * head_dim, head_dim);
            let kh = fwd.tape.slice_cols(k, h * head_dim, head_dim);
            let vh = fwd.tape.slice_cols(v, h * head_dim, head_dim);
            let kt = fwd.tape.transpose(kh);
            let mut logits = fwd.tape.matmul(qh, kt);
            if let Some(g) = gate {
                logits = fwd.tape.add_row(logits, g);
            }
            let logits = fwd.tape.scale(logits, scale);
            let weights = fwd.tape.softmax_rows(logits);
            heads.push(fwd.tape.matmul(weights, vh));
        }
        let concat = if heads.len() == 1 {
            heads[0]
        } else {
            fwd.tape.concat_cols(&heads)
        };
        self.wo.forward(fwd, concat)
    }
}

/// Deformable sampling read: every query looks up `points` learned sample
/// locations per head, expressed as offsets from its reference box center
/// and scaled by the box half-extent. Features come from bilinear
/// interpolation of the value-projected grid; per-head point weights are a
/// softmax, so they sum to one.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DeformableRead {
    pub offset_head: Linear,
    pub weight_head: Linear,
    pub value_proj: Linear,
    pub output_proj: Linear,
    pub heads: usize,
    pub points: usize,
    pub dim: usize,
}

/// Forward output plus per-head softmax weight nodes for inspection.
pub struct DeformableOut {
    pub output: Var,
    pub point_weights: Vec<Var>,
}

impl DeformableRead {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        name: &str,
        group: ParamGroup,
        dim: usize,
        heads: usize,
        points: usize,
    ) -> Self {
        assert!(dim % heads == 0, "dim must divide into heads");
        // Zero-initialized offsets start sampling at the box center.
        Self {
            offset_head: Linear::new_zeroed(
                store,
                &format!("{name}.offsets"),
                group,
                dim,
                heads * points * 2,
            ),
            weight_head: Linear::new(
                store,
                rng,
                &format!("{name}.weights"),
                group,
                dim,
                heads * points,
            ),
            value_proj: Linear::new(store, rng, &format!("{name}.value"), group, dim, dim),
            output_proj: Linear::new(store, rng, &format!("{name}.out"), group, dim, dim),
            heads,
            points,
            dim,
        }
    }

    pub fn forward(
        &self,
        fwd: &mut Fwd,
        queries: Var,
        ref_boxes: &[BoxSpec],
        grid: Var,
        grid_h: usize,
        grid_w: usize,
    ) -> DeformableOut {
        let n = fwd.tape.value(queries).nrows();
        assert_eq!(n, ref_boxes.len(), "one reference box per query");
        let head_dim = self.dim / self.heads;

        let offsets = self.offset_head.forward(fwd, queries); // n x (H*P*2)
        let weight_logits = self.weight_head.forward(fwd, queries); // n x (H*P)
        let values = self.value_proj.forward(fwd, grid); // (h*w) x dim

        let centers = fwd.tape.leaf(Array2::from_shape_fn((n, 2), |(i, j)|structural_center(
            &ref_boxes[i], j,
        )));
        let half_extent = fwd.tape.leaf(Array2::from_shape_fn((n, 2), |(i, j)| {
            if j == 0 {
                ref_boxes[i].w / 2.0
            } else {
                ref_boxes[i].h / 2.0
            }
        }));

        let mut head_outputs = Vec::with_capacity(self.heads);
        let mut point_weights = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let value_h = fwd.tape.slice_cols(values, h * head_dim, head_dim);
            let logits_h = fwd.tape.slice_cols(weight_logits, h * self.points, self.points);
            let weights_h = fwd.tape.softmax_rows(logits_h); // n x P
            point_weights.push(weights_h);

            let mut accum: Option<Var> = None;
            for p in 0..self.points {
                let off = fwd
                    .tape
                    .slice_cols(offsets, (h * self.points + p) * 2, 2);
                let scaled = fwd.tape.mul_elem(off, half_extent);
                let sample_points = fwd.tape.add(centers, scaled);
                let sampled =
                    fwd.tape
                        .bilinear_sample(value_h, sample_points, grid_h, grid_w);
                let w_col = fwd.tape.slice_cols(weights_h, p, 1);
                let weighted = fwd.tape.mul_col(sampled, w_col);
                accum = Some(match accum {
                    Some(acc) => fwd.tape.add(acc, weighted),
                    None => weighted,
                });
            }
            head_outputs.push(accum.expect("at least one point"));
        }
        let concat = if head_outputs.len() == 1 {
            head_outputs[0]
        } else {
            fwd.tape.concat_cols(&head_outputs)
        };
        DeformableOut {
            output: self.output_proj.forward(fwd, concat),
            point_weights,
        }
    }
}

fn structural_center(b: &BoxSpec, coord: usize) -> f64 {
    if coord == 0 {
        b.cx
    } else {
        b.cy
    }
}
