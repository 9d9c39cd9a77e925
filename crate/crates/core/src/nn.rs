//! Small fully connected networks with hand-written reverse-mode gradients.
//!
//! Batches are matrices with one sample per row.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::linalg::serde_rows;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Activation {
    Identity,
    Tanh,
    LeakyRelu { slope: f64 },
    Sigmoid,
}

impl Activation {
    pub fn eval(&self, x: f64) -> f64 {
        match *self {
            Activation::Identity => x,
            Activation::Tanh => x.tanh(),
            Activation::LeakyRelu { slope } => {
                if x > 0.0 {
                    x
                } else {
                    slope * x
                }
            }
            Activation::Sigmoid => sigmoid(x),
        }
    }

    /// Derivative expressed through the pre-activation `x` and output `y`.
    pub fn derivative(&self, x: f64, y: f64) -> f64 {
        match *self {
            Activation::Identity => 1.0,
            Activation::Tanh => 1.0 - y * y,
            Activation::LeakyRelu { slope } => {
                if x > 0.0 {
                    1.0
                } else {
                    slope
                }
            }
            Activation::Sigmoid => y * (1.0 - y),
        }
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

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dense {
    /// `out × in`.
    #[serde(with = "serde_rows")]
    pub weight: DMatrix<f64>,
    pub bias: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mlp {
    pub layers: Vec<Dense>,
    pub hidden: Activation,
    pub output: Activation,
}

/// Intermediate values of a batch forward pass.
pub struct MlpTape {
    /// Layer inputs; `inputs[0]` is the batch itself.
    inputs: Vec<DMatrix<f64>>,
    pre: Vec<DMatrix<f64>>,
    pub output: DMatrix<f64>,
}

impl Mlp {
    /// Glorot-normal weights scaled by `gain`, zero biases.
    pub fn new<R: Rng + ?Sized>(
        widths: &[usize],
        hidden: Activation,
        output: Activation,
        gain: f64,
        rng: &mut R,
    ) -> Self {
        assert!(widths.len() >= 2, "an MLP needs input and output widths");
        let layers = widths
            .windows(2)
            .map(|w| {
                let sd = gain * (2.0 / (w[0] + w[1]) as f64).sqrt();
                Dense {
                    weight: DMatrix::from_fn(w[1], w[0], |_, _| sd * rng.sample::<f64, _>(StandardNormal)),
                    bias: vec![0.0; w[1]],
                }
            })
            .collect();
        Self { layers, hidden, output }
    }

    /// Sets the last layer to zero so the network initially outputs the
    /// output activation of 0.
    pub fn zero_last(mut self) -> Self {
        if let Some(l) = self.layers.last_mut() {
            l.weight.fill(0.0);
            l.bias.iter_mut().for_each(|b| *b = 0.0);
        }
        self
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].weight.ncols()
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().map_or(0, |l| l.weight.nrows())
    }

    fn activation(&self, l: usize) -> Activation {
        if l + 1 == self.layers.len() {
            self.output
        } else {
            self.hidden
        }
    }

    pub fn forward(&self, x: &DMatrix<f64>) -> MlpTape {
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut pre = Vec::with_capacity(self.layers.len());
        let mut h = x.clone();
        for (l, layer) in self.layers.iter().enumerate() {
            let mut z = &h * layer.weight.transpose();
            for mut row in z.row_iter_mut() {
                for (v, b) in row.iter_mut().zip(&layer.bias) {
                    *v += b;
                }
            }
            let act = self.activation(l);
            let out = z.map(|v| act.eval(v));
            inputs.push(h);
            pre.push(z);
            h = out;
        }
        MlpTape { inputs, pre, output: h }
    }

    pub fn eval(&self, x: &DMatrix<f64>) -> DMatrix<f64> {
        self.forward(x).output
    }

    /// Output and input Jacobian (`out × in`) at a single point.
    pub fn eval_with_jacobian(&self, x: &[f64]) -> (Vec<f64>, DMatrix<f64>) {
        let mut h = DVector::from_column_slice(x);
        let mut jac = DMatrix::identity(x.len(), x.len());
        for (l, layer) in self.layers.iter().enumerate() {
            let z = &layer.weight * &h + DVector::from_column_slice(&layer.bias);
            let act = self.activation(l);
            let y = z.map(|v| act.eval(v));
            jac = &layer.weight * jac;
            for i in 0..y.len() {
                let d = act.derivative(z[i], y[i]);
                jac.row_mut(i).scale_mut(d);
            }
            h = y;
        }
        (h.iter().copied().collect(), jac)
    }

    /// Back-propagates `grad_out` (same shape as the output batch). Returns
    /// the gradient with respect to the input batch and accumulates parameter
    /// gradients into `grad_params` (layout of [`Mlp::params`]).
    pub fn backward(&self, tape: &MlpTape, grad_out: &DMatrix<f64>, grad_params: &mut [f64]) -> DMatrix<f64> {
        let mut g = grad_out.clone();
        let mut offsets = Vec::with_capacity(self.layers.len());
        let mut off = 0;
        for layer in &self.layers {
            offsets.push(off);
            off += layer.weight.len() + layer.bias.len();
        }
        for l in (0..self.layers.len()).rev() {
            let act = self.activation(l);
            let y = if l + 1 == self.layers.len() { &tape.output } else { &tape.inputs[l + 1] };
            let pre = &tape.pre[l];
            for (idx, v) in g.iter_mut().enumerate() {
                *v *= act.derivative(pre[idx], y[idx]);
            }
            let layer = &self.layers[l];
            let gw = g.transpose() * &tape.inputs[l];
            let (o, i) = layer.weight.shape();
            let base = offsets[l];
            for r in 0..o {
                for c in 0..i {
                    grad_params[base + r * i + c] += gw[(r, c)];
                }
            }
            for (r, col) in g.column_iter().enumerate() {
                grad_params[base + o * i + r] += col.sum();
            }
            g = &g * &layer.weight;
        }
        g
    }

    pub fn n_params(&self) -> usize {
        self.layers.iter().map(|l| l.weight.len() + l.bias.len()).sum()
    }

    /// Row-major weights then biases, layer by layer.
    pub fn params(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.n_params());
        for l in &self.layers {
            for r in l.weight.row_iter() {
                out.extend(r.iter());
            }
            out.extend(&l.bias);
        }
        out
    }

    pub fn set_params(&mut self, p: &[f64]) {
        let mut k = 0;
        for l in &mut self.layers {
            let (o, i) = l.weight.shape();
            for r in 0..o {
                for c in 0..i {
                    l.weight[(r, c)] = p[k];
                    k += 1;
                }
            }
            for b in &mut l.bias {
                *b = p[k];
                k += 1;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::rng_from_seed;

    #[test]
    fn backward_matches_finite_differences() {
        let mut rng = rng_from_seed(2);
        let net = Mlp::new(&[3, 5, 2], Activation::Tanh, Activation::Sigmoid, 1.0, &mut rng);
        let x = DMatrix::from_fn(4, 3, |_, _| rng.sample::<f64, _>(StandardNormal));
        let loss = |n: &Mlp| n.eval(&x).iter().map(|v| v * v).sum::<f64>();
        let tape = net.forward(&x);
        let mut g = vec![0.0; net.n_params()];
        let gx = net.backward(&tape, &(2.0 * &tape.output), &mut g);
        let p = net.params();
        for k in 0..p.len() {
            let mut a = net.clone();
            let mut b = net.clone();
            let mut pa = p.clone();
            let mut pb = p.clone();
            pa[k] += 1e-6;
            pb[k] -= 1e-6;
            a.set_params(&pa);
            b.set_params(&pb);
            let fd = (loss(&a) - loss(&b)) / 2e-6;
            assert!((fd - g[k]).abs() < 1e-6 * (1.0 + fd.abs()), "param {k}: {fd} vs {}", g[k]);
        }
        let xa = x.clone();
        let mut xp = xa.clone();
        xp[(1, 2)] += 1e-6;
        let mut xm = xa.clone();
        xm[(1, 2)] -= 1e-6;
        let fd = (net.eval(&xp).iter().map(|v| v * v).sum::<f64>() - net.eval(&xm).iter().map(|v| v * v).sum::<f64>()) / 2e-6;
        assert!((fd - gx[(1, 2)]).abs() < 1e-6);
    }

    #[test]
    fn jacobian_matches_finite_differences() {
        let mut rng = rng_from_seed(3);
        let net = Mlp::new(&[2, 6, 3], Activation::LeakyRelu { slope: 0.1 }, Activation::Identity, 1.0, &mut rng);
        let x = [0.3, -0.7];
        let (_, j) = net.eval_with_jacobian(&x);
        for c in 0..2 {
            let mut a = x;
            let mut b = x;
            a[c] += 1e-6;
            b[c] -= 1e-6;
            let fa = net.eval_with_jacobian(&a).0;
            let fb = net.eval_with_jacobian(&b).0;
            for r in 0..3 {
                assert!(((fa[r] - fb[r]) / 2e-6 - j[(r, c)]).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn params_round_trip() {
        let mut rng = rng_from_seed(1);
        let mut net = Mlp::new(&[2, 3, 1], Activation::Tanh, Activation::Identity, 1.0, &mut rng);
        let p: Vec<f64> = (0..net.n_params()).map(|k| k as f64).collect();
        net.set_params(&p);
        assert_eq!(net.params(), p);
    }
}
