use ndarray::{array, Array2};
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::gradcheck::max_relative_error;

/// Finite-difference check of an arbitrary tape program. `build` maps the
/// leaf matrices to a tape and the output var; the scalar objective is the
/// weighted sum of the output entries against fixed coefficients.
fn check_program<F>(inputs: &[Array2<f64>], build: F)
where
    F: Fn(&mut Tape, &[Var]) -> Var,
{
    let run = |inputs: &[Array2<f64>]| -> (Tape, Vec<Var>, Var) {
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|m| tape.leaf(m.clone())).collect();
        let out = build(&mut tape, &vars);
        (tape, vars, out)
    };
    let (tape, vars, out) = run(inputs);
    // Fixed pseudo-random objective coefficients decorrelate the entries.
    let out_dim = tape.value(out).dim();
    let coeffs = Array2::from_shape_fn(out_dim, |(i, j)| ((i * 31 + j * 17) % 7) as f64 - 3.0);
    let objective = |inputs: &[Array2<f64>]| -> f64 {
        let (tape, _, out) = run(inputs);
        (tape.value(out) * &coeffs).sum()
    };
    let grads = tape.backward(&[(out, coeffs.clone())]);

    let step = 1e-6;
    for (which, var) in vars.iter().enumerate() {
        let analytic = grads
            .get(*var)
            .cloned()
            .unwrap_or_else(|| Array2::zeros(inputs[which].dim()));
        let mut numeric = Array2::zeros(inputs[which].dim());
        let mut probe: Vec<Array2<f64>> = inputs.to_vec();
        for idx in ndarray::indices(inputs[which].dim()) {
            let orig = probe[which][idx];
            probe[which][idx] = orig + step;
            let up = objective(&probe);
            probe[which][idx] = orig - step;
            let down = objective(&probe);
            probe[which][idx] = orig;
            numeric[idx] = (up - down) / (2.0 * step);
        }
        let analytic_flat: Vec<f64> = analytic.iter().copied().collect();
        let numeric_flat: Vec<f64> = numeric.iter().copied().collect();
        let err = max_relative_error(&analytic_flat, &numeric_flat, 1e-4);
        assert!(err < 1e-4, "input {which}: rel err {err}");
    }
}

fn rand_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Array2<f64> {
    Array2::from_shape_fn((rows, cols), |_| rng.gen_range(-1.0..1.0))
}

#[test]
fn matmul_chain() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let a = rand_matrix(&mut rng, 3, 4);
    let b = rand_matrix(&mut rng, 4, 5);
    let c = rand_matrix(&mut rng, 5, 2);
    check_program(&[a, b, c], |t, v| {
        let ab = t.matmul(v[0], v[1]);
        t.matmul(ab, v[2])
    });
}

#[test]
fn elementwise_ops() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let a = rand_matrix(&mut rng, 3, 3);
    let b = rand_matrix(&mut rng, 3, 3);
    check_program(&[a, b], |t, v| {
        let s = t.add(v[0], v[1]);
        let d = t.sub(s, v[1]);
        let m = t.mul_elem(d, v[0]);
        t.scale(m, 0.7)
    });
}

#[test]
fn broadcast_ops() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let a = rand_matrix(&mut rng, 4, 3);
    let row = rand_matrix(&mut rng, 1, 3);
    let col = rand_matrix(&mut rng, 4, 1);
    let s = rand_matrix(&mut rng, 1, 1);
    check_program(&[a, row, col, s], |t, v| {
        let x = t.add_row(v[0], v[1]);
        let x = t.mul_col(x, v[2]);
        t.add_scalar_var(x, v[3])
    });
}

#[test]
fn activations() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let a = rand_matrix(&mut rng, 3, 4);
    check_program(&[a.clone()], |t, v| t.sigmoid(v[0]));
    check_program(&[a.clone()], |t, v| {
        let shifted = t.scale(v[0], 2.0);
        t.relu(shifted)
    });
    check_program(&[a], |t, v| t.softmax_rows(v[0]));
}

#[test]
fn normalizations() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let a = rand_matrix(&mut rng, 3, 5) + 0.5;
    check_program(&[a.clone()], |t, v| t.layer_norm_rows(v[0]));
    check_program(&[a], |t, v| t.l2_normalize_rows(v[0]));
}

#[test]
fn structural_ops() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let a = rand_matrix(&mut rng, 3, 4);
    let b = rand_matrix(&mut rng, 2, 4);
    check_program(&[a.clone(), b.clone()], |t, v| {
        let cat = t.concat_rows(&[v[0], v[1], v[0]]);
        t.select_rows(cat, &[0, 2, 4, 2])
    });
    check_program(&[a.clone()], |t, v| t.slice_cols(v[0], 1, 2));
    check_program(&[a.clone(), a.clone()], |t, v| t.concat_cols(&[v[0], v[1]]));
    check_program(&[a.clone()], |t, v| t.transpose(v[0]));
    check_program(&[a], |t, v| t.mean_rows(v[0]));
}

#[test]
fn max_cols_routes_gradient_to_argmax() {
    let a = array![[1.0, 5.0], [3.0, 2.0]];
    let mut tape = Tape::new();
    let v = tape.leaf(a);
    let m = tape.max_cols(v);
    assert_eq!(tape.value(m), &array![[3.0, 5.0]]);
    let grads = tape.backward(&[(m, array![[1.0, 2.0]])]);
    assert_eq!(grads.get(v).unwrap(), &array![[0.0, 2.0], [1.0, 0.0]]);
}

#[test]
fn bilinear_sample_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let (h, w, d) = (4, 5, 3);
    let grid = rand_matrix(&mut rng, h * w, d);
    // Interior points away from cell-center kinks and borders.
    let points = Array2::from_shape_fn((6, 2), |(_, j)| {
        if j == 0 {
            rng.gen_range(0.15..0.85)
        } else {
            rng.gen_range(0.2..0.8)
        }
    });
    check_program(&[grid, points], |t, v| t.bilinear_sample(v[0], v[1], h, w));
}

#[test]
fn bilinear_sample_constant_grid_is_constant() {
    let (h, w, d) = (3, 3, 2);
    let grid = Array2::from_elem((h * w, d), 0.8);
    let points = array![[0.1, 0.1], [0.5, 0.5], [0.95, 0.2]];
    let mut tape = Tape::new();
    let g = tape.leaf(grid);
    let p = tape.leaf(points);
    let out = tape.bilinear_sample(g, p, h, w);
    for v in tape.value(out).iter() {
        assert!((v - 0.8).abs() < 1e-12);
    }
}

#[test]
fn bilinear_sample_hand_value() {
    // 2x2 grid, one feature dim; cell centers at (0.25, 0.25) .. (0.75, 0.75).
    let grid = array![[1.0], [2.0], [3.0], [4.0]];
    let mut tape = Tape::new();
    let g = tape.leaf(grid);
    let p = tape.leaf(array![[0.5, 0.5]]);
    let out = tape.bilinear_sample(g, p, 2, 2);
    // Exactly between the four cells: mean of 1..4.
    assert!((tape.value(out)[[0, 0]] - 2.5).abs() < 1e-12);
}

#[test]
fn backward_accumulates_from_multiple_seeds() {
    let mut tape = Tape::new();
    let x = tape.leaf(array![[2.0]]);
    let y = tape.scale(x, 3.0);
    let z = tape.scale(x, 5.0);
    let grads = tape.backward(&[(y, array![[1.0]]), (z, array![[1.0]])]);
    assert_eq!(grads.get(x).unwrap()[[0, 0]], 8.0);
}

#[test]
fn shared_subexpression_accumulates() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let a = rand_matrix(&mut rng, 2, 2);
    check_program(&[a], |t, v| {
        let sq = t.mul_elem(v[0], v[0]);
        t.add(sq, v[0])
    });
}
