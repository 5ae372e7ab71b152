//! Dense layers, multi-layer perceptrons with explicit backward passes, and
//! the Adam optimizer.

use ndarray::{Array1, Array2, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

/// Glorot-uniform `out × in` matrix.
pub fn glorot<R: Rng>(rows: usize, cols: usize, rng: &mut R) -> Array2<f64> {
    let limit = (6.0 / (rows + cols) as f64).sqrt();
    Array2::from_shape_fn((rows, cols), |_| rng.gen_range(-limit..limit))
}

/// Affine map `y = x Wᵀ + b` applied row-wise.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dense {
    pub w: Array2<f64>,
    pub b: Array1<f64>,
}

impl Dense {
    pub fn new<R: Rng>(input: usize, output: usize, rng: &mut R) -> Self {
        Self {
            w: glorot(output, input, rng),
            b: Array1::zeros(output),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.w.ncols()
    }

    pub fn output_dim(&self) -> usize {
        self.w.nrows()
    }

    pub fn forward(&self, x: &Array2<f64>) -> Array2<f64> {
        x.dot(&self.w.t()) + &self.b
    }

    /// Accumulates parameter gradients into `grad` and returns `∂L/∂x`.
    pub fn backward(&self, x: &Array2<f64>, dy: &Array2<f64>, grad: &mut Dense) -> Array2<f64> {
        grad.w += &dy.t().dot(x);
        grad.b += &dy.sum_axis(Axis(0));
        dy.dot(&self.w)
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            w: Array2::zeros(self.w.raw_dim()),
            b: Array1::zeros(self.b.raw_dim()),
        }
    }
}

/// Dense layers with ReLU between them and a linear output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mlp {
    pub layers: Vec<Dense>,
}

pub struct MlpTape {
    inputs: Vec<Array2<f64>>,
    pre: Vec<Array2<f64>>,
}

impl Mlp {
    /// `dims = [input, hidden..., output]`.
    pub fn new<R: Rng>(dims: &[usize], rng: &mut R) -> Self {
        assert!(dims.len() >= 2);
        Self {
            layers: dims.windows(2).map(|w| Dense::new(w[0], w[1], rng)).collect(),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].input_dim()
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().unwrap().output_dim()
    }

    pub fn forward(&self, x: &Array2<f64>) -> Array2<f64> {
        self.forward_tape(x.clone()).0
    }

    pub fn forward_tape(&self, x: Array2<f64>) -> (Array2<f64>, MlpTape) {
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut pre = Vec::with_capacity(self.layers.len());
        let mut cur = x;
        for (idx, layer) in self.layers.iter().enumerate() {
            let z = layer.forward(&cur);
            inputs.push(cur);
            cur = if idx + 1 < self.layers.len() {
                z.mapv(|v| v.max(0.0))
            } else {
                z.clone()
            };
            pre.push(z);
        }
        (cur, MlpTape { inputs, pre })
    }

    pub fn backward(&self, tape: &MlpTape, dout: Array2<f64>, grad: &mut Mlp) -> Array2<f64> {
        let mut d = dout;
        for idx in (0..self.layers.len()).rev() {
            if idx + 1 < self.layers.len() {
                d.zip_mut_with(&tape.pre[idx], |g, &z| {
                    if z <= 0.0 {
                        *g = 0.0
                    }
                });
            }
            d = self.layers[idx].backward(&tape.inputs[idx], &d, &mut grad.layers[idx]);
        }
        d
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            layers: self.layers.iter().map(Dense::zeros_like).collect(),
        }
    }

    pub fn num_params(&self) -> usize {
        self.layers.iter().map(|l| l.w.len() + l.b.len()).sum()
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `ln(1 + eˣ)` without overflow.
pub fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        }
    }
}

/// Adam over a flat list of parameter slices. Weight decay is added to the
/// gradient (L2 form).
#[derive(Debug, Clone)]
pub struct Adam {
    config: AdamConfig,
    step: i32,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(config: AdamConfig) -> Self {
        Self {
            config,
            step: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn step(&mut self, params: Vec<&mut [f64]>, grads: Vec<&[f64]>) {
        assert_eq!(params.len(), grads.len());
        if self.m.is_empty() {
            self.m = grads.iter().map(|g| vec![0.0; g.len()]).collect();
            self.v = grads.iter().map(|g| vec![0.0; g.len()]).collect();
        }
        self.step += 1;
        let c = self.config;
        let bc1 = 1.0 - c.beta1.powi(self.step);
        let bc2 = 1.0 - c.beta2.powi(self.step);
        for (idx, (p, g)) in params.into_iter().zip(grads).enumerate() {
            let m = &mut self.m[idx];
            let v = &mut self.v[idx];
            for j in 0..p.len() {
                let gj = g[j] + c.weight_decay * p[j];
                m[j] = c.beta1 * m[j] + (1.0 - c.beta1) * gj;
                v[j] = c.beta2 * v[j] + (1.0 - c.beta2) * gj * gj;
                let mhat = m[j] / bc1;
                let vhat = v[j] / bc2;
                p[j] -= c.learning_rate * mhat / (vhat.sqrt() + c.eps);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn mlp_backward_matches_finite_differences() {
        let mut rng = crate::rng::rng(3);
        let mlp = Mlp::new(&[3, 5, 2], &mut rng);
        let x = array![[0.3, -0.2, 0.9], [1.1, 0.4, -0.7]];
        let weights = array![[1.0, -2.0], [0.5, 0.25]];
        let loss = |m: &Mlp| (m.forward(&x) * &weights).sum();
        let (_, tape) = mlp.forward_tape(x.clone());
        let mut grad = mlp.zeros_like();
        mlp.backward(&tape, weights.clone(), &mut grad);
        let h = 1e-6;
        for l in 0..2 {
            for idx in 0..mlp.layers[l].w.len() {
                let mut plus = mlp.clone();
                let mut minus = mlp.clone();
                plus.layers[l].w.as_slice_mut().unwrap()[idx] += h;
                minus.layers[l].w.as_slice_mut().unwrap()[idx] -= h;
                let fd = (loss(&plus) - loss(&minus)) / (2.0 * h);
                let an = grad.layers[l].w.as_slice().unwrap()[idx];
                assert!((fd - an).abs() < 1e-6, "layer {l} idx {idx}: {fd} vs {an}");
            }
        }
    }

    #[test]
    fn stable_logistics() {
        assert!((sigmoid(0.0) - 0.5).abs() < 1e-15);
        assert!(sigmoid(-800.0) >= 0.0 && sigmoid(800.0) <= 1.0);
        assert!((softplus(0.0) - 2f64.ln()).abs() < 1e-15);
        assert!((softplus(800.0) - 800.0).abs() < 1e-12);
    }

    #[test]
    fn adam_zero_rate_keeps_params() {
        let mut p = vec![1.0, 2.0];
        let mut adam = Adam::new(AdamConfig {
            learning_rate: 0.0,
            ..Default::default()
        });
        adam.step(vec![&mut p], vec![&[0.5, -0.5]]);
        assert_eq!(p, vec![1.0, 2.0]);
    }

    #[test]
    fn adam_descends_quadratic() {
        let mut p = vec![3.0];
        let mut adam = Adam::new(AdamConfig {
            learning_rate: 0.1,
            ..Default::default()
        });
        for _ in 0..500 {
            let g = [2.0 * p[0]];
            adam.step(vec![&mut p], vec![&g]);
        }
        assert!(p[0].abs() < 1e-2);
    }
}
