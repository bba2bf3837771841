//! Embedding-space diagnostics: the intra/inter similarity ratio, pairwise
//! similarity distributions, 2-D projections, and the embedding dump format.

use std::fmt::Write as _;
use std::path::Path;

use ndarray::{Array1, Array2};

use crate::embedding::{cosine_similarity_matrix, EmbeddingMatrix};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Embeddings with one category label per row.
#[derive(Debug, Clone)]
pub struct LabeledEmbeddings<S: Scalar, L> {
    pub embeddings: EmbeddingMatrix<S>,
    pub labels: Vec<L>,
}

impl<S: Scalar, L> LabeledEmbeddings<S, L> {
    pub fn new(embeddings: EmbeddingMatrix<S>, labels: Vec<L>) -> Result<Self> {
        if embeddings.rows() != labels.len() {
            return Err(Error::DimMismatch {
                context: "labeled embeddings",
                left: embeddings.rows(),
                right: labels.len(),
            });
        }
        Ok(Self { embeddings, labels })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

fn unique_in_order<L: PartialEq + Clone>(labels: &[L]) -> Vec<L> {
    let mut out: Vec<L> = Vec::new();
    for l in labels {
        if !out.contains(l) {
            out.push(l.clone());
        }
    }
    out
}

fn cosine<S: Scalar>(a: &Array1<S>, b: &Array1<S>) -> S {
    let dot = a.iter().zip(b.iter()).map(|(&x, &y)| x * y).fold(S::zero(), |p, q| p + q);
    let na = a.iter().map(|&x| x * x).fold(S::zero(), |p, q| p + q).sqrt();
    let nb = b.iter().map(|&x| x * x).fold(S::zero(), |p, q| p + q).sqrt();
    (dot / (na * nb)).max(-S::one()).min(S::one())
}

/// Intra/inter similarity ratio with its sign flag.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Iisr<S> {
    pub value: S,
    /// Raised when the inter-class mean similarity is negative; the ratio is
    /// reported as-is but comparisons across runs should heed the sign.
    pub negative_inter: bool,
}

/// Mean within-category pairwise cosine similarity divided by the mean
/// pairwise cosine similarity of category mean vectors. Means are taken on
/// raw embeddings; cosine is applied afterwards.
pub fn iisr<S: Scalar, L: PartialEq + Clone>(data: &LabeledEmbeddings<S, L>) -> Result<Iisr<S>> {
    let categories = unique_in_order(&data.labels);
    if categories.len() < 2 {
        return Err(Error::Invalid {
            context: "iisr",
            requirement: format!("needs >= 2 categories, got {}", categories.len()),
        });
    }
    let values = data.embeddings.values();

    let mut intra_mean_sum = S::zero();
    let mut means: Vec<Array1<S>> = Vec::with_capacity(categories.len());
    for cat in &categories {
        let rows: Vec<usize> = (0..data.len()).filter(|&i| &data.labels[i] == cat).collect();
        if rows.len() < 2 {
            return Err(Error::Invalid {
                context: "iisr",
                requirement: "every category needs >= 2 members".into(),
            });
        }
        let mut pair_sum = S::zero();
        let mut pairs = 0usize;
        for (a, &i) in rows.iter().enumerate() {
            for &j in rows.iter().skip(a + 1) {
                pair_sum += cosine(&values.row(i).to_owned(), &values.row(j).to_owned());
                pairs += 1;
            }
        }
        intra_mean_sum += pair_sum / S::from_f64(pairs as f64);

        let mut mean = Array1::zeros(values.ncols());
        for &i in &rows {
            mean = mean + values.row(i).to_owned();
        }
        means.push(mean / S::from_f64(rows.len() as f64));
    }
    let numerator = intra_mean_sum / S::from_f64(categories.len() as f64);

    let mut inter_sum = S::zero();
    let mut inter_pairs = 0usize;
    for c in 0..means.len() {
        for t in (c + 1)..means.len() {
            inter_sum += cosine(&means[c], &means[t]);
            inter_pairs += 1;
        }
    }
    let denominator = inter_sum / S::from_f64(inter_pairs as f64);
    if denominator.abs() <= S::from_f64(1e-9) {
        return Err(Error::DegenerateInterSimilarity);
    }
    Ok(Iisr {
        value: numerator / denominator,
        negative_inter: denominator < S::zero(),
    })
}

pub const HISTOGRAM_BINS: usize = 50;

/// Intra/inter pairwise similarity values plus fixed-bin histograms.
#[derive(Debug, Clone)]
pub struct SimilarityReport<S> {
    pub intra_values: Vec<S>,
    pub inter_values: Vec<S>,
    pub intra_histogram: [usize; HISTOGRAM_BINS],
    pub inter_histogram: [usize; HISTOGRAM_BINS],
    pub iisr: Option<Iisr<S>>,
}

fn histogram<S: Scalar>(values: &[S]) -> [usize; HISTOGRAM_BINS] {
    let mut bins = [0usize; HISTOGRAM_BINS];
    for &v in values {
        let unit = (v.to_f64() + 1.0) / 2.0; // [-1,1] -> [0,1]
        let idx = ((unit * HISTOGRAM_BINS as f64).floor() as usize).min(HISTOGRAM_BINS - 1);
        bins[idx] += 1;
    }
    bins
}

/// Bin edges of the fixed histogram over [-1, 1].
pub fn histogram_bin_edges(bin: usize) -> (f64, f64) {
    let width = 2.0 / HISTOGRAM_BINS as f64;
    (-1.0 + bin as f64 * width, -1.0 + (bin + 1) as f64 * width)
}

/// All within-category and cross-category pairwise cosine similarities.
pub fn similarity_distributions<S: Scalar, L: PartialEq + Clone>(
    data: &LabeledEmbeddings<S, L>,
) -> Result<SimilarityReport<S>> {
    let categories = unique_in_order(&data.labels);
    if categories.len() < 2 {
        return Err(Error::Invalid {
            context: "similarity distributions",
            requirement: "needs >= 2 categories".into(),
        });
    }
    let sims = cosine_similarity_matrix(&data.embeddings, &data.embeddings)?;
    let n = data.len();
    let mut intra = Vec::new();
    let mut inter = Vec::new();
    for i in 0..n {
        for j in 0..i {
            if data.labels[i] == data.labels[j] {
                intra.push(sims[[i, j]]);
            } else {
                inter.push(sims[[i, j]]);
            }
        }
    }

    // IISR over the categories that have enough members for it.
    let eligible: Vec<usize> = (0..n)
        .filter(|&i| {
            data.labels
                .iter()
                .filter(|l| **l == data.labels[i])
                .count()
                >= 2
        })
        .collect();
    let iisr_value = if eligible.len() >= 4 {
        let rows: Vec<Vec<S>> = eligible
            .iter()
            .map(|&i| data.embeddings.values().row(i).to_vec())
            .collect();
        let labels: Vec<L> = eligible.iter().map(|&i| data.labels[i].clone()).collect();
        let sub = LabeledEmbeddings::new(EmbeddingMatrix::from_rows(&rows)?, labels)?;
        iisr(&sub).ok()
    } else {
        None
    };

    Ok(SimilarityReport {
        intra_histogram: histogram(&intra),
        inter_histogram: histogram(&inter),
        intra_values: intra,
        inter_values: inter,
        iisr: iisr_value,
    })
}

/// 2-D projection of the embeddings.
#[derive(Debug, Clone)]
pub struct Projection {
    /// N x 2 coordinates in the top-2 principal components.
    pub coords: Array2<f64>,
    /// Raised when the data had rank < 2 and the second axis is all zeros.
    pub rank_deficient: bool,
}

/// Cyclic Jacobi eigen-decomposition of a symmetric matrix.
/// Returns eigenvalues and matching eigenvectors (columns), unsorted.
fn jacobi_eigen(matrix: &Array2<f64>) -> (Vec<f64>, Array2<f64>) {
    let n = matrix.nrows();
    let mut a = matrix.clone();
    let mut v = Array2::eye(n);
    for _sweep in 0..100 {
        let mut off = 0.0;
        for p in 0..n {
            for q in (p + 1)..n {
                off += a[[p, q]] * a[[p, q]];
            }
        }
        if off < 1e-24 {
            break;
        }
        for p in 0..n {
            for q in (p + 1)..n {
                if a[[p, q]].abs() < 1e-30 {
                    continue;
                }
                let theta = (a[[q, q]] - a[[p, p]]) / (2.0 * a[[p, q]]);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let akp = a[[k, p]];
                    let akq = a[[k, q]];
                    a[[k, p]] = c * akp - s * akq;
                    a[[k, q]] = s * akp + c * akq;
                }
                for k in 0..n {
                    let apk = a[[p, k]];
                    let aqk = a[[q, k]];
                    a[[p, k]] = c * apk - s * aqk;
                    a[[q, k]] = s * apk + c * aqk;
                }
                for k in 0..n {
                    let vkp = v[[k, p]];
                    let vkq = v[[k, q]];
                    v[[k, p]] = c * vkp - s * vkq;
                    v[[k, q]] = s * vkp + c * vkq;
                }
            }
        }
    }
    let eigenvalues = (0..n).map(|i| a[[i, i]]).collect();
    (eigenvalues, v)
}

/// Project onto the top-2 principal components of the mean-centered data.
/// Component signs follow a fixed convention: the largest-magnitude loading
/// is made positive.
pub fn project_2d<L>(data: &LabeledEmbeddings<f64, L>) -> Result<Projection> {
    let n = data.len();
    if n < 3 {
        return Err(Error::Invalid {
            context: "project_2d",
            requirement: format!("needs >= 3 rows, got {n}"),
        });
    }
    let values = data.embeddings.values();
    let d = values.ncols();
    let mean = values.mean_axis(ndarray::Axis(0)).unwrap();
    let centered = values - &mean.broadcast((n, d)).unwrap();
    let cov = centered.t().dot(&centered) / n as f64;

    let (eigenvalues, vectors) = jacobi_eigen(&cov);
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| eigenvalues[b].partial_cmp(&eigenvalues[a]).unwrap());

    let scale = eigenvalues[order[0]].abs().max(1.0);
    let rank_deficient = eigenvalues[order[1]].abs() < 1e-12 * scale;

    let mut coords = Array2::zeros((n, 2));
    for (axis, &ev_idx) in order.iter().take(2).enumerate() {
        if axis == 1 && rank_deficient {
            continue; // leave the second coordinate at zero
        }
        let mut component: Array1<f64> = vectors.column(ev_idx).to_owned();
        // Ties resolve to the smallest index so the convention is stable.
        let mut max_idx = 0;
        for (i, v) in component.iter().enumerate() {
            if v.abs() > component[max_idx].abs() + 1e-15 {
                max_idx = i;
            }
        }
        if component[max_idx] < 0.0 {
            component.mapv_inplace(|x| -x);
        }
        let projected = centered.dot(&component);
        for i in 0..n {
            coords[[i, axis]] = projected[i];
        }
    }
    Ok(Projection {
        coords,
        rank_deficient,
    })
}

// ------------------------------------------------------------- dump format

/// Write labeled embeddings in the shared dump format: a `N D` header line,
/// then one `<label>\t<floats>` line per row. Floats use the shortest
/// round-trip representation, so read-back is exact.
pub fn write_dump<P: AsRef<Path>>(data: &LabeledEmbeddings<f64, String>, path: P) -> Result<()> {
    let mut out = String::new();
    let n = data.len();
    let d = data.embeddings.dim();
    writeln!(out, "{n} {d}").unwrap();
    for i in 0..n {
        out.push_str(&data.labels[i]);
        out.push('\t');
        let row = data.embeddings.values().row(i);
        for (j, v) in row.iter().enumerate() {
            if j > 0 {
                out.push(' ');
            }
            write!(out, "{v}").unwrap();
        }
        out.push('\n');
    }
    std::fs::write(path, out)?;
    Ok(())
}

/// Read a dump written by [`write_dump`]. Errors carry the 1-based line
/// number of the offending content.
pub fn read_dump<P: AsRef<Path>>(path: P) -> Result<LabeledEmbeddings<f64, String>> {
    let content = std::fs::read_to_string(path)?;
    let mut lines = content.lines().enumerate();
    let (_, header) = lines.next().ok_or(Error::MissingHeader)?;
    let mut parts = header.split_whitespace();
    let n: usize = parts
        .next()
        .and_then(|t| t.parse().ok())
        .ok_or(Error::MissingHeader)?;
    let d: usize = parts
        .next()
        .and_then(|t| t.parse().ok())
        .ok_or(Error::MissingHeader)?;
    if parts.next().is_some() {
        return Err(Error::DumpFormat {
            line: 1,
            msg: "header must be exactly `N D`".into(),
        });
    }

    let mut labels = Vec::with_capacity(n);
    let mut rows: Vec<Vec<f64>> = Vec::with_capacity(n);
    for (idx, line) in lines {
        let line_no = idx + 1;
        if rows.len() == n {
            return Err(Error::DumpFormat {
                line: line_no,
                msg: format!("expected {n} rows, found more"),
            });
        }
        let (label, rest) = line.split_once('\t').ok_or_else(|| Error::DumpFormat {
            line: line_no,
            msg: "missing tab separator".into(),
        })?;
        let values: Vec<f64> = rest
            .split_whitespace()
            .map(|t| {
                t.parse::<f64>().map_err(|_| Error::DumpFormat {
                    line: line_no,
                    msg: format!("bad float {t:?}"),
                })
            })
            .collect::<Result<_>>()?;
        if values.len() != d {
            return Err(Error::DumpFormat {
                line: line_no,
                msg: format!("expected {d} values, found {}", values.len()),
            });
        }
        labels.push(label.to_string());
        rows.push(values);
    }
    if rows.len() != n {
        return Err(Error::DumpFormat {
            line: rows.len() + 2,
            msg: format!("expected {n} rows, found {}", rows.len()),
        });
    }
    LabeledEmbeddings::new(EmbeddingMatrix::from_rows(&rows)?, labels)
}

#[cfg(test)]
mod tests;
