//! Dense feed-forward network with hand-written backpropagation. Samples are
//! stored as matrix columns.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum OutputActivation {
    Identity,
    /// `bound * tanh(z)`
    ScaledTanh(f64),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dense {
    /// `out x in`
    pub w: DMatrix<f64>,
    pub b: DVector<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mlp {
    pub layers: Vec<Dense>,
    pub output: OutputActivation,
}

/// Values saved by the forward pass for backpropagation.
pub struct Cache {
    inputs: Vec<DMatrix<f64>>,
    pre: Vec<DMatrix<f64>>,
    out: DMatrix<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Grads {
    pub dw: Vec<DMatrix<f64>>,
    pub db: Vec<DVector<f64>>,
}

impl Mlp {
    /// Uniform `±1/sqrt(fan_in)` initialization; `zero_output` zeroes the last
    /// layer.
    pub fn new<R: Rng + ?Sized>(sizes: &[usize], output: OutputActivation, zero_output: bool, rng: &mut R) -> Self {
        assert!(sizes.len() >= 2, "network needs input and output sizes");
        let n = sizes.len() - 1;
        let layers = (0..n)
            .map(|l| {
                let (fan_in, fan_out) = (sizes[l], sizes[l + 1]);
                if zero_output && l == n - 1 {
                    return Dense {
                        w: DMatrix::zeros(fan_out, fan_in),
                        b: DVector::zeros(fan_out),
                    };
                }
                let a = 1.0 / (fan_in as f64).sqrt();
                Dense {
                    w: DMatrix::from_fn(fan_out, fan_in, |_, _| rng.gen_range(-a..a)),
                    b: DVector::from_fn(fan_out, |_, _| rng.gen_range(-a..a)),
                }
            })
            .collect();
        Mlp { layers, output }
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].w.ncols()
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().unwrap().w.nrows()
    }

    pub fn forward(&self, x: &DMatrix<f64>) -> DMatrix<f64> {
        self.forward_cached(x).out
    }

    pub fn forward_cached(&self, x: &DMatrix<f64>) -> Cache {
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut pre = Vec::with_capacity(self.layers.len());
        let mut h = x.clone();
        let last = self.layers.len() - 1;
        for (l, layer) in self.layers.iter().enumerate() {
            let mut z = &layer.w * &h;
            for mut col in z.column_iter_mut() {
                col += &layer.b;
            }
            inputs.push(h);
            h = if l < last {
                z.map(|v| v.max(0.0))
            } else {
                match self.output {
                    OutputActivation::Identity => z.clone(),
                    OutputActivation::ScaledTanh(bound) => z.map(|v| bound * v.tanh()),
                }
            };
            pre.push(z);
        }
        Cache { inputs, pre, out: h }
    }

    /// Gradients of `sum(grad_out ⊙ output)` with respect to the parameters
    /// and to the input.
    pub fn backward(&self, cache: &Cache, grad_out: &DMatrix<f64>) -> (Grads, DMatrix<f64>) {
        let n = self.layers.len();
        let mut dw = vec![DMatrix::zeros(0, 0); n];
        let mut db = vec![DVector::zeros(0); n];
        let mut delta = match self.output {
            OutputActivation::Identity => grad_out.clone(),
            OutputActivation::ScaledTanh(bound) => {
                let z = &cache.pre[n - 1];
                grad_out.zip_map(z, |g, v| {
                    let t = v.tanh();
                    g * bound * (1.0 - t * t)
                })
            }
        };
        for l in (0..n).rev() {
            dw[l] = &delta * cache.inputs[l].transpose();
            db[l] = delta.column_sum();
            let back = self.layers[l].w.transpose() * &delta;
            delta = if l > 0 {
                back.zip_map(&cache.pre[l - 1], |g, z| if z > 0.0 { g } else { 0.0 })
            } else {
                back
            };
        }
        (Grads { dw, db }, delta)
    }

    pub fn cache_output(cache: &Cache) -> &DMatrix<f64> {
        &cache.out
    }

    /// Parameter slices in a fixed order.
    pub fn params_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out = Vec::with_capacity(2 * self.layers.len());
        for layer in self.layers.iter_mut() {
            out.push(layer.w.as_mut_slice());
            out.push(layer.b.as_mut_slice());
        }
        out
    }

    pub fn params(&self) -> Vec<&[f64]> {
        let mut out = Vec::with_capacity(2 * self.layers.len());
        for layer in &self.layers {
            out.push(layer.w.as_slice());
            out.push(layer.b.as_slice());
        }
        out
    }

    pub fn n_params(&self) -> usize {
        self.layers.iter().map(|l| l.w.len() + l.b.len()).sum()
    }

    /// `target <- (1 - tau) target + tau self`
    pub fn polyak_into(&self, target: &mut Mlp, tau: f64) {
        for (src, dst) in self.layers.iter().zip(target.layers.iter_mut()) {
            dst.w.zip_apply(&src.w, |t, m| *t = (1.0 - tau) * *t + tau * m);
            dst.b.zip_apply(&src.b, |t, m| *t = (1.0 - tau) * *t + tau * m);
        }
    }

    pub fn is_finite(&self) -> bool {
        self.layers
            .iter()
            .all(|l| l.w.iter().all(|v| v.is_finite()) && l.b.iter().all(|v| v.is_finite()))
    }
}

impl Grads {
    pub fn slices(&self) -> Vec<&[f64]> {
        let mut out = Vec::with_capacity(2 * self.dw.len());
        for (w, b) in self.dw.iter().zip(&self.db) {
            out.push(w.as_slice());
            out.push(b.as_slice());
        }
        out
    }
}
