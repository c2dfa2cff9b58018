//! Ensemble deep random-vector functional-link regression (edRVFL).
//!
//! Layer `l` maps `concat(X, H_{l-1})` (just `X` for the first layer) through a
//! fixed random affine map and an activation to `H_l`. Each layer owns a ridge
//! readout on `concat(X, H_1, .., H_l)`; the prediction is the mean of the
//! layer readouts. Each target is read out independently on the rows where it
//! is present.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};

pub const MIN_ROWS_PER_TARGET: usize = 20;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Activation {
    Logistic,
    Tanh,
    Relu,
}

impl Activation {
    fn apply(self, v: f64) -> f64 {
        match self {
            Activation::Logistic => 1.0 / (1.0 + (-v).exp()),
            Activation::Tanh => v.tanh(),
            Activation::Relu => v.max(0.0),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RvflParams {
    pub layers: usize,
    pub hidden: usize,
    pub lambda: f64,
    pub activation: Activation,
    /// Random weights are drawn so that pre-activations have roughly this
    /// standard deviation on standardized inputs.
    pub weight_scale: f64,
}

impl Default for RvflParams {
    fn default() -> Self {
        RvflParams {
            layers: 8,
            hidden: 128,
            lambda: 1.0,
            activation: Activation::Logistic,
            weight_scale: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct RandomLayer {
    /// `in_dim x hidden`
    weights: DMatrix<f64>,
    bias: DVector<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct TargetReadout {
    y_mean: f64,
    /// Column means of the full design `[X, H_1..H_L]` over this target's rows.
    design_mean: DVector<f64>,
    /// One coefficient vector per layer; layer `l` uses the first
    /// `d + l * hidden` design columns.
    coefficients: Vec<DVector<f64>>,
    n_train: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EdRvfl {
    params: RvflParams,
    x_mean: Vec<f64>,
    x_scale: Vec<f64>,
    layers: Vec<RandomLayer>,
    targets: Vec<TargetReadout>,
}

impl EdRvfl {
    /// `x`: one row per sample. `y[t][i]`: value of target `t` on row `i`.
    pub fn fit(x: &[Vec<f64>], y: &[Vec<Option<f64>>], params: &RvflParams, seed: u64) -> Result<Self> {
        if !(params.lambda > 0.0) {
            return Err(invalid(format!("ridge lambda must be positive, got {}", params.lambda)));
        }
        if params.layers == 0 {
            return Err(invalid("edRVFL needs at least one layer"));
        }
        if x.is_empty() {
            return Err(invalid("edRVFL needs training rows"));
        }
        let n = x.len();
        let d = x[0].len();
        if x.iter().any(|r| r.len() != d) || y.iter().any(|col| col.len() != n) {
            return Err(invalid("ragged edRVFL training data"));
        }

        let mut x_mean = vec![0.0; d];
        let mut x_scale = vec![1.0; d];
        for j in 0..d {
            let m = x.iter().map(|r| r[j]).sum::<f64>() / n as f64;
            let var = x.iter().map(|r| (r[j] - m).powi(2)).sum::<f64>() / n as f64;
            x_mean[j] = m;
            x_scale[j] = if var > 0.0 { var.sqrt() } else { 1.0 };
        }

        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut layers = Vec::with_capacity(params.layers);
        for l in 0..params.layers {
            let in_dim = if l == 0 { d } else { d + params.hidden };
            // U[-a, a] has std a / sqrt(3)
            let a = params.weight_scale * 3f64.sqrt() / (in_dim.max(1) as f64).sqrt();
            let weights = DMatrix::from_fn(in_dim, params.hidden, |_, _| rng.gen_range(-a..=a));
            let bias = DVector::from_fn(params.hidden, |_, _| rng.gen_range(-1.0..=1.0));
            layers.push(RandomLayer { weights, bias });
        }

        let mut model = EdRvfl {
            params: params.clone(),
            x_mean,
            x_scale,
            layers,
            targets: Vec::new(),
        };
        let design = model.design(x);

        let mut row_sets: Vec<Vec<usize>> = Vec::with_capacity(y.len());
        for (t, col) in y.iter().enumerate() {
            let rows: Vec<usize> = (0..n).filter(|&i| col[i].is_some()).collect();
            if rows.len() < MIN_ROWS_PER_TARGET {
                return Err(Error::Model(format!(
                    "target {t} has {} usable rows, need at least {MIN_ROWS_PER_TARGET}",
                    rows.len()
                )));
            }
            row_sets.push(rows);
        }
        // targets observed on the same rows share one factorization
        let mut readouts: Vec<Option<TargetReadout>> = vec![None; y.len()];
        for t in 0..y.len() {
            if readouts[t].is_some() {
                continue;
            }
            let group: Vec<usize> = (t..y.len()).filter(|&u| row_sets[u] == row_sets[t]).collect();
            let rows = &row_sets[t];
            let values: Vec<Vec<f64>> = group
                .iter()
                .map(|&u| rows.iter().map(|&i| y[u][i].unwrap()).collect())
                .collect();
            for (u, r) in group.iter().zip(fit_group(&design, rows, &values, d, params)?) {
                readouts[*u] = Some(r);
            }
        }
        model.targets = readouts.into_iter().map(|r| r.expect("every target fitted")).collect();
        Ok(model)
    }

    pub fn n_targets(&self) -> usize {
        self.targets.len()
    }

    pub fn n_inputs(&self) -> usize {
        self.x_mean.len()
    }

    pub fn params(&self) -> &RvflParams {
        &self.params
    }

    /// Full design matrix `[X_std, H_1, .., H_L]`, one row per sample.
    fn design(&self, x: &[Vec<f64>]) -> DMatrix<f64> {
        let n = x.len();
        let d = self.x_mean.len();
        let h = self.params.hidden;
        let width = d + self.layers.len() * h;
        let xs = DMatrix::from_fn(n, d, |i, j| (x[i][j] - self.x_mean[j]) / self.x_scale[j]);
        let mut out = DMatrix::zeros(n, width);
        out.view_mut((0, 0), (n, d)).copy_from(&xs);
        let mut prev: Option<DMatrix<f64>> = None;
        for (l, layer) in self.layers.iter().enumerate() {
            let input = match &prev {
                None => xs.clone(),
                Some(hp) => {
                    let mut m = DMatrix::zeros(n, d + h);
                    m.view_mut((0, 0), (n, d)).copy_from(&xs);
                    m.view_mut((0, d), (n, h)).copy_from(hp);
                    m
                }
            };
            let mut hl = &input * &layer.weights;
            for mut row in hl.row_iter_mut() {
                for (v, b) in row.iter_mut().zip(layer.bias.iter()) {
                    *v = self.params.activation.apply(*v + b);
                }
            }
            out.view_mut((0, d + l * h), (n, h)).copy_from(&hl);
            prev = Some(hl);
        }
        out
    }

    /// Predictions `[sample][target]`.
    pub fn predict(&self, x: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
        if x.iter().any(|r| r.len() != self.x_mean.len()) {
            return Err(Error::Model(format!(
                "regressor expects {} inputs per row",
                self.x_mean.len()
            )));
        }
        if x.is_empty() {
            return Ok(Vec::new());
        }
        let design = self.design(x);
        let d = self.x_mean.len();
        let h = self.params.hidden;
        let mut out = vec![vec![0.0; self.targets.len()]; x.len()];
        for (t, tr) in self.targets.iter().enumerate() {
            for (i, row) in out.iter_mut().enumerate() {
                let mut acc = 0.0;
                for (l, beta) in tr.coefficients.iter().enumerate() {
                    let width = d + (l + 1) * h;
                    let mut s = 0.0;
                    for j in 0..width {
                        s += (design[(i, j)] - tr.design_mean[j]) * beta[j];
                    }
                    acc += s;
                }
                row[t] = tr.y_mean + acc / tr.coefficients.len() as f64;
            }
        }
        Ok(out)
    }

    pub fn predict_one(&self, x: &[f64]) -> Result<Vec<f64>> {
        Ok(self.predict(std::slice::from_ref(&x.to_vec()))?.remove(0))
    }
}

fn fit_group(
    design: &DMatrix<f64>,
    rows: &[usize],
    values: &[Vec<f64>],
    d: usize,
    params: &RvflParams,
) -> Result<Vec<TargetReadout>> {
    let n = rows.len();
    let width = design.ncols();
    let sub = DMatrix::from_fn(n, width, |i, j| design[(rows[i], j)]);
    let design_mean = DVector::from_fn(width, |j, _| sub.column(j).sum() / n as f64);
    let centered = DMatrix::from_fn(n, width, |i, j| sub[(i, j)] - design_mean[j]);
    let y_means: Vec<f64> = values.iter().map(|v| v.iter().sum::<f64>() / n as f64).collect();
    let yc = DMatrix::from_fn(n, values.len(), |i, t| values[t][i] - y_means[t]);

    // Layer designs are nested column prefixes, so the primal Gram matrix is
    // formed once and sliced, and the dual kernel grows block by block.
    let widths: Vec<usize> = (0..params.layers).map(|l| d + (l + 1) * params.hidden).collect();
    let primal_max = widths.iter().copied().filter(|&p| p <= n).max();
    let gram = primal_max.map(|p| {
        let c = centered.columns(0, p);
        (c.transpose() * c, c.transpose() * &yc)
    });
    let mut kernel = DMatrix::<f64>::zeros(0, 0);
    let mut kernel_cols = 0;
    let mut per_layer: Vec<DMatrix<f64>> = Vec::with_capacity(params.layers);
    for &p in &widths {
        let beta = if p <= n {
            let (g, xty) = gram.as_ref().expect("gram built for primal widths");
            let mut a = g.view((0, 0), (p, p)).into_owned();
            for i in 0..p {
                a[(i, i)] += params.lambda;
            }
            cholesky_solve(a, xty.rows(0, p).into_owned(), params.lambda)?
        } else {
            let block = centered.columns(kernel_cols, p - kernel_cols);
            let add = &block * block.transpose();
            kernel = if kernel_cols == 0 { add } else { kernel + add };
            kernel_cols = p;
            let mut a = kernel.clone();
            for i in 0..n {
                a[(i, i)] += params.lambda;
            }
            let alpha = cholesky_solve(a, yc.clone(), params.lambda)?;
            centered.columns(0, p).transpose() * alpha
        };
        per_layer.push(beta);
    }
    Ok((0..values.len())
        .map(|t| TargetReadout {
            y_mean: y_means[t],
            design_mean: design_mean.clone(),
            coefficients: per_layer.iter().map(|b| b.column(t).into_owned()).collect(),
            n_train: n,
        })
        .collect())
}

/// Closed-form ridge `argmin |y - Xb|^2 + lambda |b|^2` via the primal or dual
/// normal equations, whichever is smaller.
#[cfg(test)]
fn ridge_solve(x: &DMatrix<f64>, y: &DVector<f64>, lambda: f64) -> Result<DVector<f64>> {
    let (n, p) = x.shape();
    if p == 0 {
        return Ok(DVector::zeros(0));
    }
    if n < p {
        let mut k = x * x.transpose();
        for i in 0..n {
            k[(i, i)] += lambda;
        }
        let alpha = cholesky_solve(k, DMatrix::from_column_slice(n, 1, y.as_slice()), lambda)?;
        Ok((x.transpose() * alpha).column(0).into_owned())
    } else {
        let mut g = x.transpose() * x;
        for i in 0..p {
            g[(i, i)] += lambda;
        }
        let rhs = x.transpose() * y;
        Ok(
            cholesky_solve(g, DMatrix::from_column_slice(p, 1, rhs.as_slice()), lambda)?
                .column(0)
                .into_owned(),
        )
    }
}

/// Solves an SPD system, retrying once with a small diagonal jitter.
fn cholesky_solve(mut a: DMatrix<f64>, b: DMatrix<f64>, lambda: f64) -> Result<DMatrix<f64>> {
    if let Some(ch) = a.clone().cholesky() {
        return Ok(ch.solve(&b));
    }
    let jitter = 1e-8 * (a.trace() / a.nrows() as f64).max(lambda);
    log::warn!("ridge normal equations not positive definite; adding jitter {jitter:e}");
    for i in 0..a.nrows() {
        a[(i, i)] += jitter;
    }
    a.cholesky()
        .map(|ch| ch.solve(&b))
        .ok_or_else(|| Error::Numerical("singular ridge normal equations".into()))
}
