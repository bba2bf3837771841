use ndarray::{Array2, Axis};
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::nn::glorot;

#[test]
fn box_encoding_rejects_bad_dim() {
    let boxes = [BoxSpec::global()];
    assert!(sine_cosine_encoding(&boxes, 12, PE_BASE).is_err());
    assert!(sine_cosine_encoding(&boxes, 8, PE_BASE).is_ok());
}

#[test]
fn box_encoding_deterministic_for_identical_boxes() {
    let b = BoxSpec::new(0.3, 0.4, 0.2, 0.1);
    let enc = sine_cosine_encoding(&[b, b], 16, PE_BASE).unwrap();
    assert_eq!(enc.row(0), enc.row(1));
}

#[test]
fn box_encoding_cx_only_touches_cx_block() {
    let a = BoxSpec::new(0.3, 0.4, 0.2, 0.1);
    let b = BoxSpec::new(0.6, 0.4, 0.2, 0.1);
    let enc = sine_cosine_encoding(&[a, b], 16, PE_BASE).unwrap();
    let per_coord = 4;
    for j in 0..16 {
        let same = (enc[[0, j]] - enc[[1, j]]).abs() < 1e-15;
        if j < per_coord {
            assert!(!same, "cx-derived slot {j} should differ");
        } else {
            assert!(same, "slot {j} should be unchanged");
        }
    }
}

#[test]
fn box_encoding_matches_independent_scalar_loop() {
    // Independent reimplementation: explicit scalar loop over slots.
    let b = BoxSpec::global();
    let dim = 8;
    let base = 10000.0;
    let enc = sine_cosine_encoding(&[b], dim, base).unwrap();
    let coords = [b.cx, b.cy, b.w, b.h];
    let per_coord = dim / 4; // 2
    let n_freq = per_coord / 2; // 1
    let mut oracle = vec![0.0_f64; dim];
    for (c, &x) in coords.iter().enumerate() {
        for i in 0..n_freq {
            let freq = base.powf(i as f64 / n_freq as f64);
            let angle = x * std::f64::consts::PI / freq;
            oracle[c * per_coord + 2 * i] = angle.sin();
            oracle[c * per_coord + 2 * i + 1] = angle.cos();
        }
    }
    for (j, want) in oracle.iter().enumerate() {
        assert!((enc[[0, j]] - want).abs() < 1e-15, "slot {j}");
    }
}

fn small_config() -> PromptEncoderConfig {
    PromptEncoderConfig {
        dim: 8,
        content_dim: 8,
        layers: 1,
        heads: 1,
        points: 1,
    }
}

#[test]
fn build_queries_shape_and_global_box() {
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let enc = PromptEncoder::new(&mut store, &mut rng, "pe", small_config());
    let boxes = [
        BoxSpec::new(0.2, 0.2, 0.1, 0.1),
        BoxSpec::new(0.7, 0.7, 0.2, 0.2),
    ];
    let mut fwd = Fwd::new(&store);
    let qs = enc.build_queries(&mut fwd, &boxes).unwrap();
    assert_eq!(qs.count(), 3);
    assert_eq!(qs.boxes[2], BoxSpec::global());
    assert_eq!(fwd.tape.value(qs.queries).nrows(), 3);
}

#[test]
fn build_queries_rejects_empty() {
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let enc = PromptEncoder::new(&mut store, &mut rng, "pe", small_config());
    let mut fwd = Fwd::new(&store);
    assert!(enc.build_queries(&mut fwd, &[]).is_err());
}

#[test]
fn build_queries_zero_content_identity_projection_pads_box_encoding() {
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let config = small_config();
    let enc = PromptEncoder::new(&mut store, &mut rng, "pe", config);
    let (box_proj, content, _, query_proj) = enc.parts();
    // Zero content, identity projections.
    *store.value_mut(content) = Array2::zeros((1, config.content_dim));
    *store.value_mut(box_proj.weight) = Array2::eye(config.dim);
    *store.value_mut(box_proj.bias) = Array2::zeros((1, config.dim));
    let concat_dim = config.content_dim + config.dim;
    // Identity into the first `dim` outputs is impossible (out dim < concat
    // dim); instead make the query projection the identity on the
    // concatenated space restricted to its first `dim` columns of each block.
    // For the padded-box-encoding check we use a square projection.
    let mut square = Array2::zeros((concat_dim, config.dim));
    for j in 0..config.dim {
        square[[config.content_dim + j, j]] = 1.0;
    }
    *store.value_mut(query_proj.weight) = square;
    *store.value_mut(query_proj.bias) = Array2::zeros((1, config.dim));

    let b = BoxSpec::new(0.4, 0.5, 0.2, 0.3);
    let mut fwd = Fwd::new(&store);
    let qs = enc.build_queries(&mut fwd, &[b]).unwrap();
    let pe = sine_cosine_encoding(&[b], config.dim, PE_BASE).unwrap();
    for j in 0..config.dim {
        assert!(
            (fwd.tape.value(qs.queries)[[0, j]] - pe[[0, j]]).abs() < 1e-12,
            "slot {j}"
        );
    }
}

#[test]
fn build_queries_bitwise_deterministic() {
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let enc = PromptEncoder::new(&mut store, &mut rng, "pe", small_config());
    let boxes = [BoxSpec::new(0.3, 0.3, 0.2, 0.2)];
    let mut fwd1 = Fwd::new(&store);
    let q1 = enc.build_queries(&mut fwd1, &boxes).unwrap();
    let mut fwd2 = Fwd::new(&store);
    let q2 = enc.build_queries(&mut fwd2, &boxes).unwrap();
    assert_eq!(fwd1.tape.value(q1.queries), fwd2.tape.value(q2.queries));
}

#[test]
fn constant_grid_gives_box_independent_prompts() {
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let config = PromptEncoderConfig {
        dim: 8,
        content_dim: 8,
        layers: 3,
        heads: 2,
        points: 4,
    };
    let enc = PromptEncoder::new(&mut store, &mut rng, "pe", config);
    let grid = Array2::from_elem((16, 8), 0.37);
    let boxes_a = [BoxSpec::new(0.2, 0.2, 0.1, 0.1)];
    let boxes_b = [BoxSpec::new(0.8, 0.7, 0.3, 0.2)];
    let pa = extract_prompts_pure(&enc, &store, &boxes_a, &grid, 4, 4).unwrap();
    let pb = extract_prompts_pure(&enc, &store, &boxes_b, &grid, 4, 4).unwrap();
    for (a, b) in pa.row(0).iter().zip(pb.row(0).iter()) {
        assert!((a - b).abs() < 1e-9);
    }
}

#[test]
fn identity_single_point_extraction_is_center_bilinear_read() {
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let config = small_config();
    let enc = PromptEncoder::with_identity_transforms(&mut store, &mut rng, "pe", config);
    let (h, w) = (4, 4);
    let grid = Array2::from_shape_fn((h * w, config.dim), |(i, j)| {
        ((i * 7 + j * 3) % 11) as f64 * 0.1
    });
    let b = BoxSpec::new(0.4, 0.6, 0.2, 0.2);
    let prompts = extract_prompts_pure(&enc, &store, &[b], &grid, h, w).unwrap();

    // Independent bilinear oracle at the box center.
    let gx = b.cx * w as f64 - 0.5;
    let gy = b.cy * h as f64 - 0.5;
    let (x0, y0) = (gx.floor() as usize, gy.floor() as usize);
    let (fx, fy) = (gx - x0 as f64, gy - y0 as f64);
    for k in 0..config.dim {
        let want = (1.0 - fx) * (1.0 - fy) * grid[[y0 * w + x0, k]]
            + fx * (1.0 - fy) * grid[[y0 * w + x0 + 1, k]]
            + (1.0 - fx) * fy * grid[[(y0 + 1) * w + x0, k]]
            + fx * fy * grid[[(y0 + 1) * w + x0 + 1, k]];
        assert!((prompts[[0, k]] - want).abs() < 1e-12, "dim {k}");
    }
}

#[test]
fn two_blobs_prompts_track_their_own_blob() {
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let config = PromptEncoderConfig {
        dim: 8,
        content_dim: 8,
        layers: 3,
        heads: 1,
        points: 2,
    };
    let enc = PromptEncoder::with_identity_transforms(&mut store, &mut rng, "pe", config);
    let (h, w) = (8, 8);
    // Two orthogonal blob features planted in opposite quadrants.
    let mut va = vec![0.0; 8];
    va[0] = 1.0;
    let mut vb = vec![0.0; 8];
    vb[1] = 1.0;
    let mut grid = Array2::zeros((h * w, config.dim));
    for r in 0..h {
        for c in 0..w {
            let cell = r * w + c;
            let source = if r < 4 && c < 4 {
                &va
            } else if r >= 4 && c >= 4 {
                &vb
            } else {
                continue;
            };
            for k in 0..8 {
                grid[[cell, k]] = source[k] + 0.05 * ((cell * 13 + k) % 7) as f64 / 7.0;
            }
        }
    }
    let box_a = BoxSpec::new(0.25, 0.25, 0.3, 0.3);
    let box_b = BoxSpec::new(0.75, 0.75, 0.3, 0.3);
    // Box-query rows: the class token reads the global box and aggregates
    // only through trained self-attention, so it is not probed here.
    let pa = extract_prompts_pure(&enc, &store, &[box_a], &grid, h, w).unwrap();
    let pb = extract_prompts_pure(&enc, &store, &[box_b], &grid, h, w).unwrap();

    let cos = |x: &[f64], y: &[f64]| {
        let dot: f64 = x.iter().zip(y).map(|(a, b)| a * b).sum();
        let nx: f64 = x.iter().map(|v| v * v).sum::<f64>().sqrt();
        let ny: f64 = y.iter().map(|v| v * v).sum::<f64>().sqrt();
        dot / (nx * ny)
    };
    let pa: Vec<f64> = pa.row(0).to_vec();
    let pb: Vec<f64> = pb.row(0).to_vec();
    assert!(cos(&pa, &va) > cos(&pa, &vb), "prompt A prefers blob A");
    assert!(cos(&pb, &vb) > cos(&pb, &va), "prompt B prefers blob B");
}

#[test]
fn permuting_boxes_permutes_prompt_rows() {
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let config = PromptEncoderConfig {
        dim: 8,
        content_dim: 8,
        layers: 2,
        heads: 2,
        points: 2,
    };
    let enc = PromptEncoder::new(&mut store, &mut rng, "pe", config);
    // Give the zero-initialized heads nonzero weights so the layers do real
    // work: permutation equivariance must hold for arbitrary parameters.
    for l in 0..config.layers {
        let (read, sa) = enc.layer_parts(l);
        *store.value_mut(read.offset_head.weight) =
            glorot(&mut rng, config.dim, config.heads * config.points * 2);
        *store.value_mut(sa.wo.weight) = glorot(&mut rng, config.dim, config.dim);
    }
    let (h, w) = (6, 6);
    let grid = Array2::from_shape_fn((h * w, config.dim), |_| rng.gen_range(-1.0..1.0));
    let boxes = [
        BoxSpec::new(0.2, 0.3, 0.2, 0.2),
        BoxSpec::new(0.6, 0.6, 0.3, 0.2),
        BoxSpec::new(0.4, 0.8, 0.2, 0.3),
    ];
    let permuted = [boxes[2], boxes[0], boxes[1]];
    let p0 = extract_prompts_pure(&enc, &store, &boxes, &grid, h, w).unwrap();
    let p1 = extract_prompts_pure(&enc, &store, &permuted, &grid, h, w).unwrap();
    let perm = [2usize, 0, 1];
    for (new_row, &old_row) in perm.iter().enumerate() {
        for k in 0..config.dim {
            assert!((p1[[new_row, k]] - p0[[old_row, k]]).abs() < 1e-9);
        }
    }
    // Class-token row unchanged.
    for k in 0..config.dim {
        assert!((p1[[3, k]] - p0[[3, k]]).abs() < 1e-9);
    }
}

#[test]
fn grid_position_encoding_shape() {
    let pe = grid_position_encoding(4, 6, 16).unwrap();
    assert_eq!(pe.dim(), (24, 16));
    // Distinct cells get distinct encodings.
    let r0 = pe.index_axis(Axis(0), 0);
    let r1 = pe.index_axis(Axis(0), 1);
    assert!(r0.iter().zip(r1.iter()).any(|(a, b)| (a - b).abs() > 1e-9));
}
