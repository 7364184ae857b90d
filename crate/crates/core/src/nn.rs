//! Fully connected networks and the Adam optimizer, sized for the small
//! discriminator and the downstream classifier.

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Hidden {
    Relu,
    Tanh,
}

impl Hidden {
    fn apply(self, z: f64) -> f64 {
        match self {
            Hidden::Relu => z.max(0.0),
            Hidden::Tanh => z.tanh(),
        }
    }

    fn derivative(self, z: f64) -> f64 {
        match self {
            Hidden::Relu => {
                if z > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Hidden::Tanh => {
                let t = z.tanh();
                1.0 - t * t
            }
        }
    }
}

/// Affine layer `y = W x + b`; `w` is out×in, `b` is out×1.
#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    pub w: DMatrix<f64>,
    pub b: DMatrix<f64>,
}

/// Dense layers with a shared hidden activation and a linear output layer.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    pub layers: Vec<Dense>,
    pub hidden: Hidden,
}

/// Activations kept for the backward pass. Rows are samples.
#[derive(Debug, Clone)]
pub struct MlpTrace {
    inputs: Vec<DMatrix<f64>>,
    pre: Vec<DMatrix<f64>>,
    pub output: DMatrix<f64>,
}

impl Mlp {
    /// Widths `[in, h1, ..., out]`, weights uniform in ±√(6/(fan_in+fan_out)),
    /// biases zero.
    pub fn new(widths: &[usize], hidden: Hidden, seed: u64) -> Result<Self> {
        if widths.len() < 2 || widths.contains(&0) {
            return Err(Error::Config(format!("invalid layer widths {widths:?}")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let layers = widths
            .windows(2)
            .map(|w| {
                let bound = (6.0 / (w[0] + w[1]) as f64).sqrt();
                Dense {
                    w: DMatrix::from_fn(w[1], w[0], |_, _| rng.gen_range(-bound..bound)),
                    b: DMatrix::zeros(w[1], 1),
                }
            })
            .collect();
        Ok(Self { layers, hidden })
    }

    pub fn zeros(widths: &[usize], hidden: Hidden) -> Result<Self> {
        let mut mlp = Self::new(widths, hidden, 0)?;
        for t in mlp.tensors_mut() {
            t.fill(0.0);
        }
        Ok(mlp)
    }

    pub fn input_width(&self) -> usize {
        self.layers[0].w.ncols()
    }

    pub fn output_width(&self) -> usize {
        self.layers.last().expect("non-empty").w.nrows()
    }

    pub fn forward(&self, x: &DMatrix<f64>) -> MlpTrace {
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut pre = Vec::with_capacity(self.layers.len());
        let mut h = x.clone();
        let last = self.layers.len() - 1;
        for (l, layer) in self.layers.iter().enumerate() {
            let mut z = &h * layer.w.transpose();
            for mut row in z.row_iter_mut() {
                row += layer.b.transpose();
            }
            inputs.push(h);
            h = if l == last {
                z.clone()
            } else {
                z.map(|v| self.hidden.apply(v))
            };
            pre.push(z);
        }
        MlpTrace {
            inputs,
            pre,
            output: h,
        }
    }

    /// Gradients of a loss whose derivative w.r.t. the output is `d_out`.
    pub fn backward(&self, trace: &MlpTrace, d_out: &DMatrix<f64>) -> Vec<Dense> {
        let mut grads = Vec::with_capacity(self.layers.len());
        let mut g = d_out.clone();
        let last = self.layers.len() - 1;
        for l in (0..self.layers.len()).rev() {
            if l != last {
                g = g.zip_map(&trace.pre[l], |gv, z| gv * self.hidden.derivative(z));
            }
            let layer = &self.layers[l];
            let gw = g.transpose() * &trace.inputs[l];
            let gb = DMatrix::from_iterator(g.ncols(), 1, g.column_iter().map(|c| c.sum()));
            grads.push(Dense { w: gw, b: gb });
            g = &g * &layer.w;
        }
        grads.reverse();
        grads
    }

    pub fn tensors(&self) -> Vec<&DMatrix<f64>> {
        self.layers.iter().flat_map(|l| [&l.w, &l.b]).collect()
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut DMatrix<f64>> {
        self.layers.iter_mut().flat_map(|l| [&mut l.w, &mut l.b]).collect()
    }
}

pub fn flatten_grads(grads: &[Dense]) -> Vec<&DMatrix<f64>> {
    grads.iter().flat_map(|l| [&l.w, &l.b]).collect()
}

/// Adam with the usual defaults (β₁ = 0.9, β₂ = 0.999, ε = 1e-8).
#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    t: i32,
    m: Vec<DMatrix<f64>>,
    v: Vec<DMatrix<f64>>,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    /// Descends along `grads`; pass `ascend = true` to maximize instead.
    pub fn step(&mut self, params: Vec<&mut DMatrix<f64>>, grads: &[&DMatrix<f64>], ascend: bool) {
        assert_eq!(params.len(), grads.len(), "parameter/gradient count");
        if self.m.is_empty() {
            self.m = grads.iter().map(|g| DMatrix::zeros(g.nrows(), g.ncols())).collect();
            self.v = self.m.clone();
        }
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        let sign = if ascend { 1.0 } else { -1.0 };
        for (k, (p, g)) in params.into_iter().zip(grads).enumerate() {
            let m = &mut self.m[k];
            let v = &mut self.v[k];
            for idx in 0..p.len() {
                let gi = g[idx];
                m[idx] = self.beta1 * m[idx] + (1.0 - self.beta1) * gi;
                v[idx] = self.beta2 * v[idx] + (1.0 - self.beta2) * gi * gi;
                let mh = m[idx] / c1;
                let vh = v[idx] / c2;
                p[idx] += sign * self.lr * mh / (vh.sqrt() + self.eps);
            }
        }
    }
}
