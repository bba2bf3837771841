//! Reverse-mode autodiff over `f64` matrices.
//!
//! The tape records every forward operation; `backward` walks the record in
//! reverse and accumulates gradients. Everything is a 2-D array: vectors are
//! single-row matrices, scalars are 1x1. The op set is exactly what the
//! detector needs — dense linear algebra, row softmax, bilinear sampling.

use ndarray::{Array1, Array2, Axis};

use crate::scalar::sigmoid;

/// Handle to a tape node.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(pub(crate) usize);

enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    MulElem(Var, Var),
    /// matrix + broadcast row (1 x m)
    AddRow(Var, Var),
    /// matrix * broadcast column (n x 1)
    MulCol(Var, Var),
    /// matrix + broadcast 1x1 scalar
    AddScalarVar(Var, Var),
    Scale(Var, f64),
    Transpose(Var),
    Sigmoid(Var),
    Relu(Var),
    SoftmaxRows(Var),
    /// per-row standardization (x - mean) / sqrt(var + eps), no affine
    LayerNormRows(Var),
    L2NormalizeRows(Var),
    ConcatRows(Vec<Var>),
    SelectRows(Var, Vec<usize>),
    SliceCols(Var, usize, usize),
    ConcatCols(Vec<Var>),
    /// column-wise max over rows -> 1 x m; argmax rows cached
    MaxCols(Var, Vec<usize>),
    /// mean over rows -> 1 x m
    MeanRows(Var),
    /// bilinear read of `grid` ((h*w) x d, row-major cells) at `points`
    /// (p x 2 normalized (x, y) in [0,1]); output p x d
    BilinearSample {
        grid: Var,
        points: Var,
        h: usize,
        w: usize,
    },
}

struct Node {
    value: Array2<f64>,
    op: Op,
}

const LN_EPS: f64 = 1e-5;

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
pub struct Gradients {
    grads: Vec<Option<Array2<f64>>>,
}

impl Gradients {
    pub fn get(&self, var: Var) -> Option<&Array2<f64>> {
        self.grads[var.0].as_ref()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, var: Var) -> &Array2<f64> {
        &self.nodes[var.0].value
    }

    fn push(&mut self, value: Array2<f64>, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: Array2<f64>) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn leaf_row(&mut self, value: Array1<f64>) -> Var {
        let row = value.insert_axis(Axis(0));
        self.push(row, Op::Leaf)
    }

    pub fn scalar(&mut self, value: f64) -> Var {
        self.push(Array2::from_elem((1, 1), value), Op::Leaf)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).dot(self.value(b));
        self.push(value, Op::MatMul(a, b))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a) + self.value(b);
        self.push(value, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a) - self.value(b);
        self.push(value, Op::Sub(a, b))
    }

    pub fn mul_elem(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a) * self.value(b);
        self.push(value, Op::MulElem(a, b))
    }

    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        debug_assert_eq!(self.value(row).nrows(), 1);
        let value = self.value(a) + &self.value(row).row(0);
        self.push(value, Op::AddRow(a, row))
    }

    pub fn mul_col(&mut self, a: Var, col: Var) -> Var {
        debug_assert_eq!(self.value(col).ncols(), 1);
        let value = self.value(a) * self.value(col);
        self.push(value, Op::MulCol(a, col))
    }

    pub fn add_scalar_var(&mut self, a: Var, s: Var) -> Var {
        debug_assert_eq!(self.value(s).dim(), (1, 1));
        let sv = self.value(s)[[0, 0]];
        let value = self.value(a).mapv(|v| v + sv);
        self.push(value, Op::AddScalarVar(a, s))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let value = self.value(a).mapv(|v| v * c);
        self.push(value, Op::Scale(a, c))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let value = self.value(a).t().to_owned();
        self.push(value, Op::Transpose(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(sigmoid);
        self.push(value, Op::Sigmoid(a))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(|v| v.max(0.0));
        self.push(value, Op::Relu(a))
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let mut value = x.clone();
        for mut row in value.rows_mut() {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            row.mapv_inplace(|v| (v - max).exp());
            let sum: f64 = row.sum();
            row.mapv_inplace(|v| v / sum);
        }
        self.push(value, Op::SoftmaxRows(a))
    }

    pub fn layer_norm_rows(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let mut value = x.clone();
        for mut row in value.rows_mut() {
            let mean = row.mean().unwrap();
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / row.len() as f64;
            let denom = (var + LN_EPS).sqrt();
            row.mapv_inplace(|v| (v - mean) / denom);
        }
        self.push(value, Op::LayerNormRows(a))
    }

    pub fn l2_normalize_rows(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let mut value = x.clone();
        for mut row in value.rows_mut() {
            let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            row.mapv_inplace(|v| v / norm);
        }
        self.push(value, Op::L2NormalizeRows(a))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let cols = self.value(parts[0]).ncols();
        let total: usize = parts.iter().map(|&p| self.value(p).nrows()).sum();
        let mut value = Array2::zeros((total, cols));
        let mut offset = 0;
        for &p in parts {
            let v = self.value(p);
            value
                .slice_mut(ndarray::s![offset..offset + v.nrows(), ..])
                .assign(v);
            offset += v.nrows();
        }
        self.push(value, Op::ConcatRows(parts.to_vec()))
    }

    pub fn select_rows(&mut self, a: Var, indices: &[usize]) -> Var {
        let x = self.value(a);
        let mut value = Array2::zeros((indices.len(), x.ncols()));
        for (out_i, &i) in indices.iter().enumerate() {
            value.row_mut(out_i).assign(&x.row(i));
        }
        self.push(value, Op::SelectRows(a, indices.to_vec()))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Var {
        let value = self
            .value(a)
            .slice(ndarray::s![.., start..start + len])
            .to_owned();
        self.push(value, Op::SliceCols(a, start, len))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let rows = self.value(parts[0]).nrows();
        let total: usize = parts.iter().map(|&p| self.value(p).ncols()).sum();
        let mut value = Array2::zeros((rows, total));
        let mut offset = 0;
        for &p in parts {
            let v = self.value(p);
            value
                .slice_mut(ndarray::s![.., offset..offset + v.ncols()])
                .assign(v);
            offset += v.ncols();
        }
        self.push(value, Op::ConcatCols(parts.to_vec()))
    }

    pub fn max_cols(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let mut value = Array2::zeros((1, x.ncols()));
        let mut argmax = vec![0usize; x.ncols()];
        for j in 0..x.ncols() {
            let mut best = f64::NEG_INFINITY;
            for i in 0..x.nrows() {
                if x[[i, j]] > best {
                    best = x[[i, j]];
                    argmax[j] = i;
                }
            }
            value[[0, j]] = best;
        }
        self.push(value, Op::MaxCols(a, argmax))
    }

    pub fn mean_rows(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let value = x
            .mean_axis(Axis(0))
            .expect("mean of empty matrix")
            .insert_axis(Axis(0));
        self.push(value, Op::MeanRows(a))
    }

    /// Bilinear interpolation of grid features at normalized points.
    /// Cell (r, c) has center ((c + 0.5)/w, (r + 0.5)/h); points clamp to
    /// the valid sample range, which also zeroes their boundary gradient.
    pub fn bilinear_sample(&mut self, grid: Var, points: Var, h: usize, w: usize) -> Var {
        let (value, _) = self.bilinear_eval(grid, points, h, w);
        self.push(value, Op::BilinearSample { grid, points, h, w })
    }

    fn bilinear_eval(
        &self,
        grid: Var,
        points: Var,
        h: usize,
        w: usize,
    ) -> (Array2<f64>, Vec<BilinearCell>) {
        let g = self.value(grid);
        let p = self.value(points);
        let d = g.ncols();
        let n = p.nrows();
        let mut out = Array2::zeros((n, d));
        let mut cells = Vec::with_capacity(n);
        for i in 0..n {
            let cell = bilinear_cell(p[[i, 0]], p[[i, 1]], h, w);
            for k in 0..d {
                out[[i, k]] = cell.w00 * g[[cell.i00, k]]
                    + cell.w01 * g[[cell.i01, k]]
                    + cell.w10 * g[[cell.i10, k]]
                    + cell.w11 * g[[cell.i11, k]];
            }
            cells.push(cell);
        }
        (out, cells)
    }

    /// Backward pass from (possibly several) seeded outputs.
    pub fn backward(&self, seeds: &[(Var, Array2<f64>)]) -> Gradients {
        let mut grads: Vec<Option<Array2<f64>>> = vec![None; self.nodes.len()];
        for (var, seed) in seeds {
            debug_assert_eq!(seed.dim(), self.value(*var).dim());
            accumulate(&mut grads, var.0, seed.clone());
        }
        for idx in (0..self.nodes.len()).rev() {
            let Some(g) = grads[idx].clone() else {
                continue;
            };
            match &self.nodes[idx].op {
                Op::Leaf => {}
                Op::MatMul(a, b) => {
                    let ga = g.dot(&self.value(*b).t());
                    let gb = self.value(*a).t().dot(&g);
                    accumulate(&mut grads, a.0, ga);
                    accumulate(&mut grads, b.0, gb);
                }
                Op::Add(a, b) => {
                    accumulate(&mut grads, a.0, g.clone());
                    accumulate(&mut grads, b.0, g);
                }
                Op::Sub(a, b) => {
                    accumulate(&mut grads, a.0, g.clone());
                    accumulate(&mut grads, b.0, -g);
                }
                Op::MulElem(a, b) => {
                    let ga = &g * self.value(*b);
                    let gb = &g * self.value(*a);
                    accumulate(&mut grads, a.0, ga);
                    accumulate(&mut grads, b.0, gb);
                }
                Op::AddRow(a, row) => {
                    accumulate(&mut grads, a.0, g.clone());
                    let grow = g.sum_axis(Axis(0)).insert_axis(Axis(0));
                    accumulate(&mut grads, row.0, grow);
                }
                Op::MulCol(a, col) => {
                    let ga = &g * self.value(*col);
                    let gcol = (&g * self.value(*a))
                        .sum_axis(Axis(1))
                        .insert_axis(Axis(1));
                    accumulate(&mut grads, a.0, ga);
                    accumulate(&mut grads, col.0, gcol);
                }
                Op::AddScalarVar(a, s) => {
                    accumulate(&mut grads, a.0, g.clone());
                    let gs = Array2::from_elem((1, 1), g.sum());
                    accumulate(&mut grads, s.0, gs);
                }
                Op::Scale(a, c) => {
                    accumulate(&mut grads, a.0, g.mapv(|v| v * c));
                }
                Op::Transpose(a) => {
                    accumulate(&mut grads, a.0, g.t().to_owned());
                }
                Op::Sigmoid(a) => {
                    let y = &self.nodes[idx].value;
                    let ga = &g * &y.mapv(|v| v * (1.0 - v));
                    accumulate(&mut grads, a.0, ga);
                }
                Op::Relu(a) => {
                    let x = self.value(*a);
                    let mut ga = g.clone();
                    ga.zip_mut_with(x, |gv, &xv| {
                        if xv <= 0.0 {
                            *gv = 0.0;
                        }
                    });
                    accumulate(&mut grads, a.0, ga);
                }
                Op::SoftmaxRows(a) => {
                    let y = &self.nodes[idx].value;
                    let mut ga = Array2::zeros(g.dim());
                    for i in 0..g.nrows() {
                        let dot: f64 = g
                            .row(i)
                            .iter()
                            .zip(y.row(i).iter())
                            .map(|(gv, yv)| gv * yv)
                            .sum();
                        for j in 0..g.ncols() {
                            ga[[i, j]] = y[[i, j]] * (g[[i, j]] - dot);
                        }
                    }
                    accumulate(&mut grads, a.0, ga);
                }
                Op::LayerNormRows(a) => {
                    let x = self.value(*a);
                    let n = x.ncols() as f64;
                    let mut ga = Array2::zeros(g.dim());
                    for i in 0..x.nrows() {
                        let row = x.row(i);
                        let mean = row.mean().unwrap();
                        let var =
                            row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
                        let denom = (var + LN_EPS).sqrt();
                        let xhat: Vec<f64> = row.iter().map(|v| (v - mean) / denom).collect();
                        let gmean = g.row(i).mean().unwrap();
                        let gxhat: f64 = g
                            .row(i)
                            .iter()
                            .zip(&xhat)
                            .map(|(gv, xh)| gv * xh)
                            .sum::<f64>()
                            / n;
                        for j in 0..x.ncols() {
                            ga[[i, j]] = (g[[i, j]] - gmean - xhat[j] * gxhat) / denom;
                        }
                    }
                    accumulate(&mut grads, a.0, ga);
                }
                Op::L2NormalizeRows(a) => {
                    let x = self.value(*a);
                    let ga = crate::losses::l2_normalize_backward(x, &g);
                    accumulate(&mut grads, a.0, ga);
                }
                Op::ConcatRows(parts) => {
                    let mut offset = 0;
                    for &p in parts {
                        let rows = self.value(p).nrows();
                        let gp = g.slice(ndarray::s![offset..offset + rows, ..]).to_owned();
                        accumulate(&mut grads, p.0, gp);
                        offset += rows;
                    }
                }
                Op::SelectRows(a, indices) => {
                    let mut ga = Array2::zeros(self.value(*a).dim());
                    for (out_i, &i) in indices.iter().enumerate() {
                        let mut row = ga.row_mut(i);
                        row += &g.row(out_i);
                    }
                    accumulate(&mut grads, a.0, ga);
                }
                Op::SliceCols(a, start, len) => {
                    let mut ga = Array2::zeros(self.value(*a).dim());
                    ga.slice_mut(ndarray::s![.., *start..start + len]).assign(&g);
                    accumulate(&mut grads, a.0, ga);
                }
                Op::ConcatCols(parts) => {
                    let mut offset = 0;
                    for &p in parts {
                        let cols = self.value(p).ncols();
                        let gp = g.slice(ndarray::s![.., offset..offset + cols]).to_owned();
                        accumulate(&mut grads, p.0, gp);
                        offset += cols;
                    }
                }
                Op::MaxCols(a, argmax) => {
                    let mut ga = Array2::zeros(self.value(*a).dim());
                    for (j, &i) in argmax.iter().enumerate() {
                        ga[[i, j]] += g[[0, j]];
                    }
                    accumulate(&mut grads, a.0, ga);
                }
                Op::MeanRows(a) => {
                    let n = self.value(*a).nrows() as f64;
                    let shape = self.value(*a).dim();
                    let mut ga = Array2::zeros(shape);
                    for mut row in ga.rows_mut() {
                        row.assign(&(&g.row(0) / n));
                    }
                    accumulate(&mut grads, a.0, ga);
                }
                Op::BilinearSample { grid, points, h, w } => {
                    let gval = self.value(*grid);
                    let pval = self.value(*points);
                    let d = gval.ncols();
                    let mut ggrid = Array2::zeros(gval.dim());
                    let mut gpoints = Array2::zeros(pval.dim());
                    for i in 0..pval.nrows() {
                        let cell = bilinear_cell(pval[[i, 0]], pval[[i, 1]], *h, *w);
                        for k in 0..d {
                            let go = g[[i, k]];
                            ggrid[[cell.i00, k]] += go * cell.w00;
                            ggrid[[cell.i01, k]] += go * cell.w01;
                            ggrid[[cell.i10, k]] += go * cell.w10;
                            ggrid[[cell.i11, k]] += go * cell.w11;
                            // d value / d gx: difference along x, weighted by y mix.
                            let dvx = (1.0 - cell.fy)
                                * (gval[[cell.i01, k]] - gval[[cell.i00, k]])
                                + cell.fy * (gval[[cell.i11, k]] - gval[[cell.i10, k]]);
                            let dvy = (1.0 - cell.fx)
                                * (gval[[cell.i10, k]] - gval[[cell.i00, k]])
                                + cell.fx * (gval[[cell.i11, k]] - gval[[cell.i01, k]]);
                            gpoints[[i, 0]] += go * dvx * cell.dx_dnorm;
                            gpoints[[i, 1]] += go * dvy * cell.dy_dnorm;
                        }
                    }
                    accumulate(&mut grads, grid.0, ggrid);
                    accumulate(&mut grads, points.0, gpoints);
                }
            }
        }
        Gradients { grads }
    }
}

struct BilinearCell {
    i00: usize,
    i01: usize,
    i10: usize,
    i11: usize,
    w00: f64,
    w01: f64,
    w10: f64,
    w11: f64,
    fx: f64,
    fy: f64,
    /// d(grid x)/d(normalized x); zero when the point clamped.
    dx_dnorm: f64,
    dy_dnorm: f64,
}

fn bilinear_cell(nx: f64, ny: f64, h: usize, w: usize) -> BilinearCell {
    // Normalized [0,1] to continuous cell coordinates with cell centers at
    // integer positions 0..w-1.
    let gx_raw = nx * w as f64 - 0.5;
    let gy_raw = ny * h as f64 - 0.5;
    let gx = gx_raw.clamp(0.0, (w - 1) as f64);
    let gy = gy_raw.clamp(0.0, (h - 1) as f64);
    let dx_dnorm = if gx_raw > 0.0 && gx_raw < (w - 1) as f64 {
        w as f64
    } else {
        0.0
    };
    let dy_dnorm = if gy_raw > 0.0 && gy_raw < (h - 1) as f64 {
        h as f64
    } else {
        0.0
    };
    let x0 = (gx.floor() as usize).min(w - 1);
    let y0 = (gy.floor() as usize).min(h - 1);
    let x1 = (x0 + 1).min(w - 1);
    let y1 = (y0 + 1).min(h - 1);
    let fx = gx - x0 as f64;
    let fy = gy - y0 as f64;
    BilinearCell {
        i00: y0 * w + x0,
        i01: y0 * w + x1,
        i10: y1 * w + x0,
        i11: y1 * w + x1,
        w00: (1.0 - fx) * (1.0 - fy),
        w01: fx * (1.0 - fy),
        w10: (1.0 - fx) * fy,
        w11: fx * fy,
        fx,
        fy,
        dx_dnorm,
        dy_dnorm,
    }
}

fn accumulate(grads: &mut [Option<Array2<f64>>], idx: usize, g: Array2<f64>) {
    match &mut grads[idx] {
        Some(existing) => *existing += &g,
        slot @ None => *slot = Some(g),
    }
}

#[cfg(test)]
mod tests;
