use approx::assert_abs_diff_eq;
use ndarray::Array2;
use proptest::{prop_assert, proptest};
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;

use super::*;

fn labeled(rows: &[Vec<f64>], labels: &[&str]) -> LabeledEmbeddings<f64, String> {
    LabeledEmbeddings::new(
        EmbeddingMatrix::from_rows(rows).unwrap(),
        labels.iter().map(|s| s.to_string()).collect(),
    )
    .unwrap()
}

/// Brute-force IISR: independent double loops, no shared code with `iisr`.
fn iisr_oracle(rows: &[Vec<f64>], labels: &[&str]) -> f64 {
    let cos = |a: &[f64], b: &[f64]| {
        let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
        let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
        let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
        dot / (na * nb)
    };
    let mut cats: Vec<&str> = Vec::new();
    for l in labels {
        if !cats.contains(l) {
            cats.push(l);
        }
    }
    let mut intra_total = 0.0;
    let mut means: Vec<Vec<f64>> = Vec::new();
    for cat in &cats {
        let members: Vec<&Vec<f64>> = labels
            .iter()
            .zip(rows)
            .filter(|(l, _)| l == &cat)
            .map(|(_, r)| r)
            .collect();
        let mut sum = 0.0;
        let mut count = 0.0;
        for i in 0..members.len() {
            for j in 0..i {
                sum += cos(members[i], members[j]);
                count += 1.0;
            }
        }
        intra_total += sum / count;
        let d = members[0].len();
        let mut mean = vec![0.0; d];
        for m in &members {
            for k in 0..d {
                mean[k] += m[k];
            }
        }
        for item in &mut mean {
            *item /= members.len() as f64;
        }
        means.push(mean);
    }
    let numerator = intra_total / cats.len() as f64;
    let mut inter = 0.0;
    let mut count = 0.0;
    for i in 0..means.len() {
        for j in 0..i {
            inter += cos(&means[i], &means[j]);
            count += 1.0;
        }
    }
    numerator / (inter / count)
}

#[test]
fn iisr_hand_value() {
    let data = labeled(
        &[
            vec![1.0, 0.0],
            vec![1.0, 0.0],
            vec![0.7071, 0.7071],
            vec![0.7071, 0.7071],
        ],
        &["a", "a", "b", "b"],
    );
    let out = iisr(&data).unwrap();
    assert_abs_diff_eq!(out.value, 1.4142, epsilon = 1e-4);
    assert!(!out.negative_inter);
}

#[test]
fn iisr_all_identical_is_one() {
    let data = labeled(
        &[
            vec![0.3, 0.4],
            vec![0.3, 0.4],
            vec![0.3, 0.4],
            vec![0.3, 0.4],
        ],
        &["a", "a", "b", "b"],
    );
    assert_abs_diff_eq!(iisr(&data).unwrap().value, 1.0, epsilon = 1e-12);
}

#[test]
fn iisr_orthogonal_means_degenerate() {
    let data = labeled(
        &[
            vec![1.0, 0.0],
            vec![1.0, 0.0],
            vec![0.0, 1.0],
            vec![0.0, 1.0],
        ],
        &["a", "a", "b", "b"],
    );
    assert!(matches!(
        iisr(&data),
        Err(Error::DegenerateInterSimilarity)
    ));
}

#[test]
fn iisr_negative_denominator_flagged() {
    let data = labeled(
        &[
            vec![1.0, 0.1],
            vec![1.0, -0.1],
            vec![-1.0, 0.1],
            vec![-1.0, -0.1],
        ],
        &["a", "a", "b", "b"],
    );
    let out = iisr(&data).unwrap();
    assert!(out.negative_inter);
    assert!(out.value < 0.0);
}

#[test]
fn iisr_requires_two_members_per_category() {
    let data = labeled(
        &[vec![1.0, 0.0], vec![1.0, 0.1], vec![0.5, 0.5]],
        &["a", "a", "b"],
    );
    assert!(iisr(&data).is_err());
}

#[test]
fn iisr_matches_bruteforce_oracle() {
    for seed in 0..20 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let k = rng.gen_range(2..=5);
        let d = rng.gen_range(3..=6);
        let mut rows = Vec::new();
        let mut labels: Vec<String> = Vec::new();
        for c in 0..k {
            let n_c = rng.gen_range(2..=10);
            for _ in 0..n_c {
                rows.push((0..d).map(|_| rng.gen_range(-1.0..1.0)).collect());
                labels.push(format!("c{c}"));
            }
        }
        let label_refs: Vec<&str> = labels.iter().map(|s| s.as_str()).collect();
        let data = labeled(&rows, &label_refs);
        match iisr(&data) {
            Ok(out) => {
                let oracle = iisr_oracle(&rows, &label_refs);
                assert!(
                    (out.value - oracle).abs() < 1e-9,
                    "seed {seed}: {} vs {oracle}",
                    out.value
                );
            }
            Err(Error::DegenerateInterSimilarity) => {} // oracle would divide by ~0
            Err(e) => panic!("unexpected error: {e}"),
        }
    }
}

proptest! {
    #[test]
    fn iisr_invariant_to_scaling_and_rotation(seed in 0_u64..40) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let rows: Vec<Vec<f64>> = (0..6)
            .map(|_| (0..3).map(|_| rng.gen_range(-1.0..1.0)).collect())
            .collect();
        let labels = ["a", "a", "a", "b", "b", "b"];
        let data = labeled(&rows, &labels);
        let base = match iisr(&data) {
            Ok(v) => v.value,
            Err(_) => return Ok(()),
        };

        // Global positive scaling: both intra cosines and the raw category
        // means scale together, so the ratio is unchanged.
        let s = rng.gen_range(0.1..5.0);
        let scaled: Vec<Vec<f64>> = rows
            .iter()
            .map(|r| r.iter().map(|v| v * s).collect())
            .collect();
        let v = iisr(&labeled(&scaled, &labels)).unwrap().value;
        prop_assert!((v - base).abs() < 1e-9);

        // Per-embedding scaling keeps the numerator: cosine ignores norms.
        // (Means are taken on raw embeddings, so the denominator may move.)
        let per_row: Vec<Vec<f64>> = rows
            .iter()
            .map(|r| {
                let s = rng.gen_range(0.1..5.0);
                r.iter().map(|v| v * s).collect()
            })
            .collect();
        if let (Ok(a), Ok(b)) = (
            similarity_distributions(&labeled(&rows, &labels)),
            similarity_distributions(&labeled(&per_row, &labels)),
        ) {
            for (x, y) in a.intra_values.iter().zip(b.intra_values.iter()) {
                prop_assert!((x - y).abs() < 1e-9);
            }
        }

        // Global rotation in the (0,1) plane.
        let theta: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
        let rotated: Vec<Vec<f64>> = rows
            .iter()
            .map(|r| {
                vec![
                    r[0] * theta.cos() - r[1] * theta.sin(),
                    r[0] * theta.sin() + r[1] * theta.cos(),
                    r[2],
                ]
            })
            .collect();
        let v = iisr(&labeled(&rotated, &labels)).unwrap().value;
        prop_assert!((v - base).abs() < 1e-7);
    }

    #[test]
    fn iisr_nondecreasing_under_shrinkage(seed in 0_u64..40) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        // Class means well away from the origin, members = mean + noise.
        let k = 3;
        let d = 4;
        let means: Vec<Vec<f64>> = (0..k)
            .map(|_| (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect())
            .collect();
        let mut deltas: Vec<(usize, Vec<f64>)> = Vec::new();
        for (c, _) in means.iter().enumerate() {
            // Two members with opposite deviations keep the mean fixed.
            let delta: Vec<f64> = (0..d).map(|_| rng.gen_range(-0.3..0.3)).collect();
            deltas.push((c, delta.clone()));
            deltas.push((c, delta.iter().map(|v| -v).collect()));
        }
        let build = |shrink: f64| -> Vec<Vec<f64>> {
            deltas
                .iter()
                .map(|(c, delta)| {
                    (0..d).map(|j| means[*c][j] + shrink * delta[j]).collect()
                })
                .collect()
        };
        let labels = ["a", "a", "b", "b", "c", "c"];
        let mut previous: Option<f64> = None;
        for shrink in [1.0, 0.6, 0.3, 0.1] {
            match iisr(&labeled(&build(shrink), &labels)) {
                Ok(out) => {
                    if out.negative_inter {
                        return Ok(());
                    }
                    if let Some(prev) = previous {
                        prop_assert!(out.value >= prev - 1e-9);
                    }
                    previous = Some(out.value);
                }
                Err(_) => return Ok(()),
            }
        }
    }
}

#[test]
fn distribution_pair_counts() {
    let data = labeled(
        &[
            vec![1.0, 0.0],
            vec![0.9, 0.1],
            vec![0.0, 1.0],
            vec![0.1, 0.9],
        ],
        &["a", "a", "b", "b"],
    );
    let report = similarity_distributions(&data).unwrap();
    assert_eq!(report.intra_values.len(), 2);
    assert_eq!(report.inter_values.len(), 4);
}

#[test]
fn distribution_identical_members_top_bin() {
    let data = labeled(
        &[
            vec![1.0, 0.0],
            vec![1.0, 0.0],
            vec![0.0, 1.0],
            vec![0.0, 1.0],
        ],
        &["a", "a", "b", "b"],
    );
    let report = similarity_distributions(&data).unwrap();
    assert_eq!(report.intra_histogram[HISTOGRAM_BINS - 1], 2);
    assert_eq!(report.intra_histogram.iter().sum::<usize>(), 2);
}

#[test]
fn distribution_counts_match_bruteforce() {
    for seed in 0..10 {
        let mut rng = ChaCha8Rng::seed_from_u64(1000 + seed);
        let n = rng.gen_range(4..=12);
        let rows: Vec<Vec<f64>> = (0..n)
            .map(|_| (0..3).map(|_| rng.gen_range(-1.0..1.0)).collect())
            .collect();
        let labels: Vec<String> = (0..n).map(|_| format!("c{}", rng.gen_range(0..3))).collect();
        let label_refs: Vec<&str> = labels.iter().map(|s| s.as_str()).collect();
        if label_refs.iter().collect::<std::collections::HashSet<_>>().len() < 2 {
            continue;
        }
        let data = labeled(&rows, &label_refs);
        let report = similarity_distributions(&data).unwrap();
        let mut intra = 0;
        let mut inter = 0;
        for i in 0..n {
            for j in 0..i {
                if labels[i] == labels[j] {
                    intra += 1;
                } else {
                    inter += 1;
                }
            }
        }
        assert_eq!(report.intra_values.len(), intra);
        assert_eq!(report.inter_values.len(), inter);
        // Closed-form check: intra + inter = n(n-1)/2.
        assert_eq!(intra + inter, n * (n - 1) / 2);
    }
}

#[test]
fn projection_line_has_zero_second_axis() {
    let rows: Vec<Vec<f64>> = (0..5).map(|i| vec![i as f64, 2.0 * i as f64]).collect();
    let labels = ["a", "a", "a", "b", "b"];
    let p = project_2d(&labeled(&rows, &labels)).unwrap();
    assert!(p.rank_deficient);
    for i in 0..5 {
        assert_abs_diff_eq!(p.coords[[i, 1]], 0.0, epsilon = 1e-9);
    }
}

#[test]
fn projection_three_point_hand_eigenproblem() {
    // Points (0,0), (2,0), (0,2): centered covariance is [[8/9,-4/9],[-4/9,8/9]],
    // eigenvalues 4/3 (along (1,-1)/sqrt(2)) and 4/9 (along (1,1)/sqrt(2)).
    let rows = vec![vec![0.0, 0.0], vec![2.0, 0.0], vec![0.0, 2.0]];
    let labels = ["a", "a", "a"];
    let p = project_2d(&labeled(&rows, &labels)).unwrap();
    let s = 2.0_f64.sqrt();
    // Centered data: (-2/3,-2/3), (4/3,-2/3), (-2/3,4/3).
    // First component (1,-1)/sqrt2 (sign convention: first loading positive):
    // projections 0, 2/sqrt2 = sqrt2, -sqrt2.
    assert_abs_diff_eq!(p.coords[[0, 0]], 0.0, epsilon = 1e-9);
    assert_abs_diff_eq!(p.coords[[1, 0]], s, epsilon = 1e-9);
    assert_abs_diff_eq!(p.coords[[2, 0]], -s, epsilon = 1e-9);
    // Second component (1,1)/sqrt2: projections -2sqrt2/3, sqrt2/3, sqrt2/3.
    assert_abs_diff_eq!(p.coords[[0, 1]], -2.0 * s / 3.0, epsilon = 1e-9);
    assert_abs_diff_eq!(p.coords[[1, 1]], s / 3.0, epsilon = 1e-9);
    assert_abs_diff_eq!(p.coords[[2, 1]], s / 3.0, epsilon = 1e-9);
}

#[test]
fn projection_distances_preserved_under_rotation() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let rows: Vec<Vec<f64>> = (0..6)
        .map(|_| (0..2).map(|_| rng.gen_range(-1.0..1.0)).collect())
        .collect();
    let labels = ["a"; 6];
    let p0 = project_2d(&labeled(&rows, &labels)).unwrap();
    let theta: f64 = 0.7;
    let rotated: Vec<Vec<f64>> = rows
        .iter()
        .map(|r| {
            vec![
                r[0] * theta.cos() - r[1] * theta.sin(),
                r[0] * theta.sin() + r[1] * theta.cos(),
            ]
        })
        .collect();
    let p1 = project_2d(&labeled(&rotated, &labels)).unwrap();
    for i in 0..6 {
        for j in 0..i {
            let d0 = ((p0.coords[[i, 0]] - p0.coords[[j, 0]]).powi(2)
                + (p0.coords[[i, 1]] - p0.coords[[j, 1]]).powi(2))
            .sqrt();
            let d1 = ((p1.coords[[i, 0]] - p1.coords[[j, 0]]).powi(2)
                + (p1.coords[[i, 1]] - p1.coords[[j, 1]]).powi(2))
            .sqrt();
            assert_abs_diff_eq!(d0, d1, epsilon = 1e-6);
        }
    }
}

#[test]
fn dump_round_trip_is_exact() {
    let dir = std::env::temp_dir().join("viplab_dump_test");
    std::fs::create_dir_all(&dir).unwrap();
    let path = dir.join("roundtrip.txt");
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    let rows: Vec<Vec<f64>> = (0..5)
        .map(|_| (0..4).map(|_| rng.gen_range(-10.0..10.0)).collect())
        .collect();
    let labels: Vec<&str> = vec!["dog", "cat", "dog", "bird", "cat"];
    let data = labeled(&rows, &labels);
    write_dump(&data, &path).unwrap();
    let back = read_dump(&path).unwrap();
    assert_eq!(back.labels, data.labels);
    for (a, b) in back
        .embeddings
        .values()
        .iter()
        .zip(data.embeddings.values().iter())
    {
        assert!((a - b).abs() < 1e-15);
        assert_eq!(a, b); // shortest round-trip representation is exact
    }
}

#[test]
fn dump_truncated_rows_error_names_line() {
    let dir = std::env::temp_dir().join("viplab_dump_test");
    std::fs::create_dir_all(&dir).unwrap();
    let path = dir.join("truncated.txt");
    std::fs::write(&path, "3 4\na\t1 2 3 4\nb\t5 6 7 8\n").unwrap();
    let err = read_dump(&path).unwrap_err();
    let msg = err.to_string();
    assert!(msg.contains("expected 3 rows, found 2"), "{msg}");
    assert!(msg.contains("line 4"), "{msg}");
}

#[test]
fn dump_empty_file_missing_header() {
    let dir = std::env::temp_dir().join("viplab_dump_test");
    std::fs::create_dir_all(&dir).unwrap();
    let path = dir.join("empty.txt");
    std::fs::write(&path, "").unwrap();
    let err = read_dump(&path).unwrap_err();
    assert_eq!(err.to_string(), "missing header");
}

#[test]
fn dump_bad_float_reports_line() {
    let dir = std::env::temp_dir().join("viplab_dump_test");
    std::fs::create_dir_all(&dir).unwrap();
    let path = dir.join("badfloat.txt");
    std::fs::write(&path, "1 2\nx\t1.0 oops\n").unwrap();
    let err = read_dump(&path).unwrap_err();
    let msg = err.to_string();
    assert!(msg.contains("line 2"), "{msg}");
}
