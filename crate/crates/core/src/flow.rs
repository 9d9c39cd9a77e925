//! Normalizing flows with analytic log-determinants, and the training
//! objectives built on them.
//!
//! A [`FlowModel`] stores the encoding direction `g: x ↦ z`; the learned
//! mixing is `g⁻¹`. Layers are applied in list order when encoding.

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::contrast::local_ima_of_jacobian;
use crate::error::{Error, Result};
use crate::nn::{sigmoid, Activation, Mlp, MlpTape};
use crate::optim::{Adam, AdamConfig};
use crate::rng::{child_rng, rng_from_seed};
use crate::stats::LN_2PI;

pub const DEFAULT_S_MAX: f64 = 3.0;
/// Bound on element-wise log-scales; exceeding it is clamped and flagged.
pub const LOG_SCALE_LIMIT: f64 = 20.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Coupling {
    /// `true` marks coordinates that pass through unchanged and condition the
    /// transformation of the others.
    pub mask: Vec<bool>,
    /// Maps the conditioning coordinates to `(raw scale, shift)` for the others.
    pub net: Mlp,
    pub s_max: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum FlowLayer {
    /// `z_b = (x_b − t(x_a))·exp(−s(x_a))`, `s = s_max·tanh(raw/s_max)`.
    Coupling(Coupling),
    /// `z[i] = x[perm[i]]`.
    Permutation { perm: Vec<usize> },
    /// `z = (x − shift)·exp(−log_scale)`.
    ElementwiseAffine { shift: Vec<f64>, log_scale: Vec<f64> },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlowModel {
    pub dim: usize,
    pub layers: Vec<FlowLayer>,
    /// Final element-wise logistic sigmoid onto `(0,1)ⁿ`.
    pub sigmoid_head: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BaseDensity {
    StandardNormal,
    /// Uniform on `(0,1)ⁿ`; pair with a sigmoid head.
    UnitUniform,
}

impl BaseDensity {
    pub fn log_pdf(&self, z: &[f64]) -> f64 {
        match self {
            BaseDensity::StandardNormal => z.iter().map(|v| -0.5 * v * v - 0.5 * LN_2PI).sum(),
            BaseDensity::UnitUniform => {
                if z.iter().all(|&v| v > 0.0 && v < 1.0) {
                    0.0
                } else {
                    f64::NEG_INFINITY
                }
            }
        }
    }

    fn grad_log_pdf(&self, z: f64) -> f64 {
        match self {
            BaseDensity::StandardNormal => -z,
            BaseDensity::UnitUniform => 0.0,
        }
    }
}

enum LayerTape {
    Coupling { net: MlpTape, raw: DMatrix<f64>, s: DMatrix<f64>, zb: DMatrix<f64> },
    Permutation,
    Affine { z: DMatrix<f64>, clamped: Vec<bool> },
}

/// Values kept from a batch encoding for back-propagation.
pub struct FlowTape {
    tapes: Vec<LayerTape>,
    head_input: Option<DMatrix<f64>>,
    pub z: DMatrix<f64>,
    pub logdet: DVector<f64>,
    /// Some element-wise log-scale hit [`LOG_SCALE_LIMIT`].
    pub clamped: bool,
}

fn split_cols(x: &DMatrix<f64>, mask: &[bool], want: bool) -> DMatrix<f64> {
    let idx: Vec<usize> = (0..mask.len()).filter(|&i| mask[i] == want).collect();
    DMatrix::from_fn(x.nrows(), idx.len(), |r, c| x[(r, idx[c])])
}

fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

impl Coupling {
    fn n_b(&self) -> usize {
        self.mask.iter().filter(|&&m| !m).count()
    }
}

impl FlowModel {
    pub fn identity(dim: usize) -> Self {
        Self { dim, layers: Vec::new(), sigmoid_head: false }
    }

    /// Alternating affine couplings separated by random permutations, with a
    /// final element-wise affine layer. Starts as the identity (plus head).
    pub fn coupling<R: Rng + ?Sized>(dim: usize, blocks: usize, hidden: &[usize], sigmoid_head: bool, rng: &mut R) -> Self {
        let mut layers = Vec::new();
        if dim >= 2 {
            for k in 0..blocks {
                let half = dim / 2;
                let mask: Vec<bool> = (0..dim).map(|i| (i < half) == (k % 2 == 0)).collect();
                let na = mask.iter().filter(|&&m| m).count();
                let mut widths = vec![na];
                widths.extend_from_slice(hidden);
                widths.push(2 * (dim - na));
                let net = Mlp::new(&widths, Activation::Tanh, Activation::Identity, 1.0, rng).zero_last();
                layers.push(FlowLayer::Coupling(Coupling { mask, net, s_max: DEFAULT_S_MAX }));
                if dim > 2 && k + 1 < blocks {
                    let mut perm: Vec<usize> = (0..dim).collect();
                    perm.shuffle(rng);
                    layers.push(FlowLayer::Permutation { perm });
                }
            }
        }
        layers.push(FlowLayer::ElementwiseAffine { shift: vec![0.0; dim], log_scale: vec![0.0; dim] });
        Self { dim, layers, sigmoid_head }
    }

    pub fn n_params(&self) -> usize {
        self.layers
            .iter()
            .map(|l| match l {
                FlowLayer::Coupling(c) => c.net.n_params(),
                FlowLayer::Permutation { .. } => 0,
                FlowLayer::ElementwiseAffine { shift, .. } => 2 * shift.len(),
            })
            .sum()
    }

    pub fn params(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.n_params());
        for l in &self.layers {
            match l {
                FlowLayer::Coupling(c) => out.extend(c.net.params()),
                FlowLayer::Permutation { .. } => {}
                FlowLayer::ElementwiseAffine { shift, log_scale } => {
                    out.extend(shift);
                    out.extend(log_scale);
                }
            }
        }
        out
    }

    pub fn set_params(&mut self, p: &[f64]) {
        let mut k = 0;
        for l in &mut self.layers {
            match l {
                FlowLayer::Coupling(c) => {
                    let n = c.net.n_params();
                    c.net.set_params(&p[k..k + n]);
                    k += n;
                }
                FlowLayer::Permutation { .. } => {}
                FlowLayer::ElementwiseAffine { shift, log_scale } => {
                    let n = shift.len();
                    shift.copy_from_slice(&p[k..k + n]);
                    log_scale.copy_from_slice(&p[k + n..k + 2 * n]);
                    k += 2 * n;
                }
            }
        }
    }

    /// Encodes a batch (rows = samples) and records what backward needs.
    pub fn encode_batch(&self, x: &DMatrix<f64>) -> FlowTape {
        let rows = x.nrows();
        let mut h = x.clone();
        let mut logdet = DVector::zeros(rows);
        let mut tapes = Vec::with_capacity(self.layers.len());
        let mut clamped_any = false;
        for layer in &self.layers {
            match layer {
                FlowLayer::Coupling(c) => {
                    let xa = split_cols(&h, &c.mask, true);
                    let xb = split_cols(&h, &c.mask, false);
                    let nb = c.n_b();
                    let net = c.net.forward(&xa);
                    let raw = net.output.columns(0, nb).into_owned();
                    let t = net.output.columns(nb, nb);
                    let s = raw.map(|v| c.s_max * (v / c.s_max).tanh());
                    let zb = DMatrix::from_fn(rows, nb, |r, j| (xb[(r, j)] - t[(r, j)]) * (-s[(r, j)]).exp());
                    for r in 0..rows {
                        logdet[r] -= s.row(r).sum();
                    }
                    let mut jb = 0;
                    for (col, &m) in c.mask.iter().enumerate() {
                        if !m {
                            h.set_column(col, &zb.column(jb));
                            jb += 1;
                        }
                    }
                    tapes.push(LayerTape::Coupling { net, raw, s, zb });
                }
                FlowLayer::Permutation { perm } => {
                    h = DMatrix::from_fn(rows, perm.len(), |r, i| h[(r, perm[i])]);
                    tapes.push(LayerTape::Permutation);
                }
                FlowLayer::ElementwiseAffine { shift, log_scale } => {
                    let clamped: Vec<bool> = log_scale.iter().map(|v| v.abs() > LOG_SCALE_LIMIT).collect();
                    clamped_any |= clamped.iter().any(|&c| c);
                    let ls: Vec<f64> = log_scale.iter().map(|v| v.clamp(-LOG_SCALE_LIMIT, LOG_SCALE_LIMIT)).collect();
                    let z = DMatrix::from_fn(rows, shift.len(), |r, j| (h[(r, j)] - shift[j]) * (-ls[j]).exp());
                    let total: f64 = ls.iter().sum();
                    logdet.add_scalar_mut(-total);
                    h = z.clone();
                    tapes.push(LayerTape::Affine { z, clamped });
                }
            }
        }
        let head_input = if self.sigmoid_head {
            let y = h.clone();
            for r in 0..rows {
                logdet[r] += y.row(r).iter().map(|&v| -softplus(v) - softplus(-v)).sum::<f64>();
            }
            h = y.map(sigmoid);
            Some(y)
        } else {
            None
        };
        FlowTape { tapes, head_input, z: h, logdet, clamped: clamped_any }
    }

    /// Back-propagates `grad_z` and per-row `grad_logdet` through a recorded
    /// encoding. Returns `(grad_x, grad_params)`.
    pub fn backward(&self, tape: &FlowTape, grad_z: &DMatrix<f64>, grad_logdet: &DVector<f64>) -> (DMatrix<f64>, Vec<f64>) {
        let rows = grad_z.nrows();
        let mut grads = vec![0.0; self.n_params()];
        let mut offsets = Vec::with_capacity(self.layers.len());
        let mut off = 0;
        for l in &self.layers {
            offsets.push(off);
            off += match l {
                FlowLayer::Coupling(c) => c.net.n_params(),
                FlowLayer::Permutation { .. } => 0,
                FlowLayer::ElementwiseAffine { shift, .. } => 2 * shift.len(),
            };
        }
        let mut g = grad_z.clone();
        if let Some(y) = &tape.head_input {
            for r in 0..rows {
                for j in 0..self.dim {
                    let sg = sigmoid(y[(r, j)]);
                    g[(r, j)] = g[(r, j)] * sg * (1.0 - sg) + grad_logdet[r] * (1.0 - 2.0 * sg);
                }
            }
        }
        for (l, layer) in self.layers.iter().enumerate().rev() {
            match (layer, &tape.tapes[l]) {
                (FlowLayer::Coupling(c), LayerTape::Coupling { net, raw, s, zb }) => {
                    let nb = c.n_b();
                    let gza = split_cols(&g, &c.mask, true);
                    let gzb = split_cols(&g, &c.mask, false);
                    let mut gnet = DMatrix::zeros(rows, 2 * nb);
                    let mut gxb = DMatrix::zeros(rows, nb);
                    for r in 0..rows {
                        for j in 0..nb {
                            let e = (-s[(r, j)]).exp();
                            gxb[(r, j)] = gzb[(r, j)] * e;
                            let gs = -gzb[(r, j)] * zb[(r, j)] - grad_logdet[r];
                            let th = (raw[(r, j)] / c.s_max).tanh();
                            gnet[(r, j)] = gs * (1.0 - th * th);
                            gnet[(r, nb + j)] = -gzb[(r, j)] * e;
                        }
                    }
                    let n = c.net.n_params();
                    let gxa = gza + c.net.backward(net, &gnet, &mut grads[offsets[l]..offsets[l] + n]);
                    let (mut ja, mut jb) = (0, 0);
                    for (col, &m) in c.mask.iter().enumerate() {
                        if m {
                            g.set_column(col, &gxa.column(ja));
                            ja += 1;
                        } else {
                            g.set_column(col, &gxb.column(jb));
                            jb += 1;
                        }
                    }
                }
                (FlowLayer::Permutation { perm }, LayerTape::Permutation) => {
                    let mut gx = DMatrix::zeros(rows, perm.len());
                    for (i, &p) in perm.iter().enumerate() {
                        gx.set_column(p, &g.column(i));
                    }
                    g = gx;
                }
                (FlowLayer::ElementwiseAffine { log_scale, .. }, LayerTape::Affine { z, clamped }) => {
                    let n = log_scale.len();
                    let gl_total: f64 = grad_logdet.sum();
                    for j in 0..n {
                        let ls = log_scale[j].clamp(-LOG_SCALE_LIMIT, LOG_SCALE_LIMIT);
                        let e = (-ls).exp();
                        let mut gshift = 0.0;
                        let mut gls = 0.0;
                        for r in 0..rows {
                            gshift -= g[(r, j)] * e;
                            gls -= g[(r, j)] * z[(r, j)];
                            g[(r, j)] *= e;
                        }
                        grads[offsets[l] + j] = gshift;
                        grads[offsets[l] + n + j] = if clamped[j] { 0.0 } else { gls - gl_total };
                    }
                }
                _ => unreachable!("tape does not match layer"),
            }
        }
        (g, grads)
    }

    fn row_matrix(x: &[f64]) -> DMatrix<f64> {
        DMatrix::from_row_slice(1, x.len(), x)
    }

    /// `(g(x), log|det J_g(x)|)`.
    pub fn encode(&self, x: &[f64]) -> (Vec<f64>, f64) {
        let t = self.encode_batch(&Self::row_matrix(x));
        (t.z.row(0).iter().copied().collect(), t.logdet[0])
    }

    /// `g(x)` and its Jacobian `J_g(x)` by forward-mode propagation.
    pub fn encode_with_jacobian(&self, x: &[f64]) -> (Vec<f64>, DMatrix<f64>) {
        let n = self.dim;
        let mut h = x.to_vec();
        let mut jac = DMatrix::identity(n, n);
        for layer in &self.layers {
            match layer {
                FlowLayer::Coupling(c) => {
                    let a_idx: Vec<usize> = (0..n).filter(|&i| c.mask[i]).collect();
                    let b_idx: Vec<usize> = (0..n).filter(|&i| !c.mask[i]).collect();
                    let nb = b_idx.len();
                    let xa: Vec<f64> = a_idx.iter().map(|&i| h[i]).collect();
                    let (out, jn) = c.net.eval_with_jacobian(&xa);
                    let mut jl = DMatrix::identity(n, n);
                    for (j, &bi) in b_idx.iter().enumerate() {
                        let th = (out[j] / c.s_max).tanh();
                        let s = c.s_max * th;
                        let e = (-s).exp();
                        let zb = (h[bi] - out[nb + j]) * e;
                        jl[(bi, bi)] = e;
                        for (k, &ai) in a_idx.iter().enumerate() {
                            let ds = (1.0 - th * th) * jn[(j, k)];
                            jl[(bi, ai)] = -e * jn[(nb + j, k)] - zb * ds;
                        }
                        h[bi] = zb;
                    }
                    jac = jl * jac;
                }
                FlowLayer::Permutation { perm } => {
                    h = perm.iter().map(|&p| h[p]).collect();
                    jac = crate::linalg::permutation_matrix(perm) * jac;
                }
                FlowLayer::ElementwiseAffine { shift, log_scale } => {
                    for j in 0..n {
                        let e = (-log_scale[j].clamp(-LOG_SCALE_LIMIT, LOG_SCALE_LIMIT)).exp();
                        h[j] = (h[j] - shift[j]) * e;
                        jac.row_mut(j).scale_mut(e);
                    }
                }
            }
        }
        if self.sigmoid_head {
            for j in 0..n {
                let sg = sigmoid(h[j]);
                h[j] = sg;
                jac.row_mut(j).scale_mut(sg * (1.0 - sg));
            }
        }
        (h, jac)
    }

    /// `g⁻¹(z)`, the learned mixing.
    pub fn decode(&self, z: &[f64]) -> Result<Vec<f64>> {
        if z.len() != self.dim {
            return Err(Error::Dimension(format!("expected length {}, got {}", self.dim, z.len())));
        }
        let mut h = z.to_vec();
        if self.sigmoid_head {
            for v in &mut h {
                if !(*v > 0.0 && *v < 1.0) {
                    return Err(Error::Domain(format!("{v} is outside the sigmoid range")));
                }
                *v = (*v / (1.0 - *v)).ln();
            }
        }
        for layer in self.layers.iter().rev() {
            match layer {
                FlowLayer::Coupling(c) => {
                    let a_idx: Vec<usize> = (0..self.dim).filter(|&i| c.mask[i]).collect();
                    let b_idx: Vec<usize> = (0..self.dim).filter(|&i| !c.mask[i]).collect();
                    let nb = b_idx.len();
                    let xa: Vec<f64> = a_idx.iter().map(|&i| h[i]).collect();
                    let out = c.net.eval(&Self::row_matrix(&xa));
                    for (j, &bi) in b_idx.iter().enumerate() {
                        let s = c.s_max * (out[(0, j)] / c.s_max).tanh();
                        h[bi] = h[bi] * s.exp() + out[(0, nb + j)];
                    }
                }
                FlowLayer::Permutation { perm } => {
                    let mut x = vec![0.0; h.len()];
                    for (i, &p) in perm.iter().enumerate() {
                        x[p] = h[i];
                    }
                    h = x;
                }
                FlowLayer::ElementwiseAffine { shift, log_scale } => {
                    for j in 0..self.dim {
                        h[j] = h[j] * log_scale[j].clamp(-LOG_SCALE_LIMIT, LOG_SCALE_LIMIT).exp() + shift[j];
                    }
                }
            }
        }
        Ok(h)
    }

    /// `log p(x) = log base(g(x)) + log|det J_g(x)|`.
    pub fn log_density(&self, base: BaseDensity, x: &[f64]) -> f64 {
        let (z, ld) = self.encode(x);
        base.log_pdf(&z) + ld
    }

    /// Per-row log-densities of a batch.
    pub fn log_density_batch(&self, base: BaseDensity, x: &DMatrix<f64>) -> Vec<f64> {
        let t = self.encode_batch(x);
        (0..x.nrows())
            .map(|r| base.log_pdf(&t.z.row(r).iter().copied().collect::<Vec<_>>()) + t.logdet[r])
            .collect()
    }

    /// `C_IMA` of the learned mixing `g⁻¹`, averaged over the latent images of
    /// the given observations: `c_IMA(J_g(x)⁻¹)`.
    pub fn ima_contrast(&self, x: &DMatrix<f64>) -> f64 {
        let mut total = 0.0;
        let mut count = 0;
        for r in 0..x.nrows() {
            let row: Vec<f64> = x.row(r).iter().copied().collect();
            let (_, jg) = self.encode_with_jacobian(&row);
            if let Some(jf) = jg.try_inverse() {
                if let Ok((c, _)) = local_ima_of_jacobian(&jf) {
                    total += c;
                    count += 1;
                }
            }
        }
        if count == 0 {
            f64::INFINITY
        } else {
            total / count as f64
        }
    }

    /// Central finite-difference gradient of [`FlowModel::ima_contrast`] with
    /// respect to the parameters.
    pub fn ima_contrast_gradient(&self, x: &DMatrix<f64>, step: f64) -> Vec<f64> {
        let p = self.params();
        let mut probe = self.clone();
        let mut work = p.clone();
        let mut g = vec![0.0; p.len()];
        for k in 0..p.len() {
            work[k] = p[k] + step;
            probe.set_params(&work);
            let up = probe.ima_contrast(x);
            work[k] = p[k] - step;
            probe.set_params(&work);
            let down = probe.ima_contrast(x);
            work[k] = p[k];
            g[k] = (up - down) / (2.0 * step);
        }
        g
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub adam: AdamConfig,
    /// Mini-batch size; for InfoNCE this is `K` (one positive, `K − 1` negatives).
    pub batch_size: usize,
    pub epochs: usize,
    /// Weight of the IMA regularizer.
    pub lambda: f64,
    /// InfoNCE temperature.
    pub tau: f64,
    pub val_fraction: f64,
    /// Early-stopping patience in epochs.
    pub patience: usize,
    /// Rows of each batch used for the finite-difference IMA gradient.
    pub ima_subsample: usize,
    pub fd_step: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            adam: AdamConfig::default(),
            batch_size: 256,
            epochs: 100,
            lambda: 0.0,
            tau: 1.0,
            val_fraction: 0.2,
            patience: 20,
            ima_subsample: 32,
            fd_step: 1e-5,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.lambda < 0.0 || !self.lambda.is_finite() {
            return Err(Error::Config(format!("lambda must be ≥ 0, got {}", self.lambda)));
        }
        if !(self.tau > 0.0) {
            return Err(Error::Config(format!("tau must be > 0, got {}", self.tau)));
        }
        if self.batch_size < 2 || self.epochs == 0 {
            return Err(Error::Config("batch_size ≥ 2 and epochs ≥ 1 required".into()));
        }
        if !(self.val_fraction > 0.0 && self.val_fraction < 1.0) {
            return Err(Error::Config("val_fraction must lie in (0,1)".into()));
        }
        if !(self.adam.lr > 0.0) {
            return Err(Error::Config("learning rate must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train: f64,
    pub val: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome<M> {
    /// Best checkpoint by validation objective.
    pub model: M,
    pub history: Vec<EpochRecord>,
    pub best_val: f64,
    /// Set when training stopped on a non-finite loss.
    pub diverged: Option<String>,
    /// Set when the InfoNCE encoder output collapsed.
    pub collapsed: bool,
}

/// Writes the history as CSV rows `epoch,train,val`.
pub fn history_csv(history: &[EpochRecord]) -> String {
    let mut s = String::from("epoch,train,val\n");
    for h in history {
        s.push_str(&format!("{},{:.16e},{:.16e}\n", h.epoch, h.train, h.val));
    }
    s
}

pub(crate) fn split_rows(n: usize, val_fraction: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut rng_from_seed(seed));
    let n_val = ((n as f64) * val_fraction).round().max(1.0) as usize;
    let val = idx.split_off(n - n_val.min(n - 1));
    (idx, val)
}

pub(crate) fn gather(x: &DMatrix<f64>, rows: &[usize]) -> DMatrix<f64> {
    DMatrix::from_fn(rows.len(), x.ncols(), |r, c| x[(rows[r], c)])
}

/// Generic early-stopping loop. `step` performs one optimizer update on a
/// batch of row indices and returns the batch objective; `validate` scores
/// the current model.
pub(crate) fn run_epochs<M: Clone>(
    model: &mut M,
    n_train: usize,
    cfg: &TrainConfig,
    mut step: impl FnMut(&mut M, &[usize]) -> f64,
    mut validate: impl FnMut(&M) -> f64,
    mut after_epoch: impl FnMut(&M) -> bool,
) -> TrainOutcome<M> {
    let mut order: Vec<usize> = (0..n_train).collect();
    let mut rng = child_rng(cfg.seed, 1);
    let mut best = model.clone();
    let mut best_val = validate(model);
    let mut history = Vec::new();
    let mut stale = 0;
    let mut diverged = None;
    let mut collapsed = false;
    'epochs: for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        let mut sum = 0.0;
        let mut batches = 0;
        for chunk in order.chunks(cfg.batch_size) {
            if chunk.len() < 2 {
                continue;
            }
            let loss = step(model, chunk);
            if !loss.is_finite() {
                diverged = Some(format!("non-finite training loss at epoch {epoch}"));
                break 'epochs;
            }
            sum += loss;
            batches += 1;
        }
        let val = validate(model);
        if !val.is_finite() {
            diverged = Some(format!("non-finite validation objective at epoch {epoch}"));
            break;
        }
        history.push(EpochRecord { epoch, train: sum / batches.max(1) as f64, val });
        collapsed |= after_epoch(model);
        if val < best_val {
            best_val = val;
            best = model.clone();
            stale = 0;
        } else {
            stale += 1;
            if stale >= cfg.patience {
                break;
            }
        }
    }
    if let Some(reason) = &diverged {
        log::warn!("{reason}; returning last finite checkpoint");
    }
    TrainOutcome { model: best, history, best_val, diverged, collapsed }
}

/// Mean negative log-likelihood of a batch and its gradient.
pub fn nll_and_gradient(flow: &FlowModel, base: BaseDensity, x: &DMatrix<f64>) -> (f64, Vec<f64>) {
    let tape = flow.encode_batch(x);
    let b = x.nrows() as f64;
    let mut loss = 0.0;
    for r in 0..x.nrows() {
        let z: Vec<f64> = tape.z.row(r).iter().copied().collect();
        loss -= base.log_pdf(&z) + tape.logdet[r];
    }
    let gz = tape.z.map(|v| -base.grad_log_pdf(v) / b);
    let gl = DVector::from_element(x.nrows(), -1.0 / b);
    let (_, grads) = flow.backward(&tape, &gz, &gl);
    (loss / b, grads)
}

fn nll(flow: &FlowModel, base: BaseDensity, x: &DMatrix<f64>) -> f64 {
    -flow.log_density_batch(base, x).iter().sum::<f64>() / x.nrows() as f64
}

/// Maximum likelihood with optional IMA regularization:
/// minimizes `NLL + λ·C_IMA(g⁻¹)`.
pub fn train_mle(flow: FlowModel, data: &DMatrix<f64>, base: BaseDensity, cfg: &TrainConfig) -> Result<TrainOutcome<FlowModel>> {
    cfg.validate()?;
    if data.ncols() != flow.dim {
        return Err(Error::Dimension(format!("data has {} columns, flow has dimension {}", data.ncols(), flow.dim)));
    }
    if data.iter().any(|v| !v.is_finite()) {
        return Err(Error::Config("training data contains non-finite values".into()));
    }
    let (train_idx, val_idx) = split_rows(data.nrows(), cfg.val_fraction, cfg.seed);
    let train = gather(data, &train_idx);
    let val = gather(data, &val_idx);
    let val_ima = val.rows(0, val.nrows().min(256)).into_owned();
    let mut opt = Adam::new(cfg.adam, flow.n_params());
    let mut model = flow;
    let outcome = run_epochs(
        &mut model,
        train.nrows(),
        cfg,
        |m, rows| {
            let batch = gather(&train, rows);
            let (mut loss, mut grads) = nll_and_gradient(m, base, &batch);
            if cfg.lambda > 0.0 {
                let sub = batch.rows(0, batch.nrows().min(cfg.ima_subsample.max(1))).into_owned();
                let reg = m.ima_contrast_gradient(&sub, cfg.fd_step);
                for (g, r) in grads.iter_mut().zip(reg) {
                    *g += cfg.lambda * r;
                }
                loss += cfg.lambda * m.ima_contrast(&sub);
            }
            let mut p = m.params();
            opt.step(&mut p, &grads);
            m.set_params(&p);
            loss
        },
        |m| {
            let mut v = nll(m, base, &val);
            if cfg.lambda > 0.0 {
                v += cfg.lambda * m.ima_contrast(&val_ima);
            }
            v
        },
        |_| false,
    );
    Ok(outcome)
}

/// Paired views `(x, x̃)`, one pair per row.
#[derive(Debug, Clone, PartialEq)]
pub struct PairData {
    pub x: DMatrix<f64>,
    pub x_tilde: DMatrix<f64>,
}

impl PairData {
    pub fn new(x: DMatrix<f64>, x_tilde: DMatrix<f64>) -> Result<Self> {
        if x.shape() != x_tilde.shape() {
            return Err(Error::Dimension("paired views differ in shape".into()));
        }
        Ok(Self { x, x_tilde })
    }

    pub fn len(&self) -> usize {
        self.x.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.x.nrows() == 0
    }
}

/// InfoNCE with `sim(a, b) = −‖a − b‖²/τ` and in-batch negatives. Returns the
/// loss and its gradients with respect to both embedding batches.
pub fn info_nce(a: &DMatrix<f64>, b: &DMatrix<f64>, tau: f64) -> (f64, DMatrix<f64>, DMatrix<f64>) {
    let k = a.nrows();
    let sim = DMatrix::from_fn(k, k, |i, j| -(a.row(i) - b.row(j)).norm_squared() / tau);
    let mut loss = 0.0;
    let mut g = DMatrix::zeros(k, k);
    for i in 0..k {
        let row = sim.row(i);
        let m = row.max();
        let z: f64 = row.iter().map(|v| (v - m).exp()).sum();
        loss += -sim[(i, i)] + m + z.ln();
        for j in 0..k {
            g[(i, j)] = (sim[(i, j)] - m).exp() / z / k as f64;
        }
        g[(i, i)] -= 1.0 / k as f64;
    }
    let mut ga = DMatrix::zeros(k, a.ncols());
    let mut gb = DMatrix::zeros(k, a.ncols());
    for i in 0..k {
        for j in 0..k {
            let w = g[(i, j)] * 2.0 / tau;
            if w == 0.0 {
                continue;
            }
            for c in 0..a.ncols() {
                let d = a[(i, c)] - b[(j, c)];
                ga[(i, c)] -= w * d;
                gb[(j, c)] += w * d;
            }
        }
    }
    (loss / k as f64, ga, gb)
}

/// Mean squared distance between matched rows (the alignment term).
pub fn alignment(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    (a - b).row_iter().map(|r| r.norm_squared()).sum::<f64>() / a.nrows() as f64
}

const COLLAPSE_VARIANCE: f64 = 1e-6;
const COLLAPSE_EPOCHS: usize = 5;

/// Contrastive training of an encoder onto `(0,1)^{n_c}` with InfoNCE.
pub fn train_align_maxent(encoder: Mlp, pairs: &PairData, cfg: &TrainConfig) -> Result<TrainOutcome<Mlp>> {
    cfg.validate()?;
    if pairs.x.ncols() != encoder.input_dim() {
        return Err(Error::Dimension("encoder input width does not match the views".into()));
    }
    let (train_idx, val_idx) = split_rows(pairs.len(), cfg.val_fraction, cfg.seed);
    let val_a = gather(&pairs.x, &val_idx);
    let val_b = gather(&pairs.x_tilde, &val_idx);
    let mut opt = Adam::new(cfg.adam, encoder.n_params());
    let mut model = encoder;
    let mut low_var_epochs = 0;
    let probe = gather(&pairs.x, &train_idx[..train_idx.len().min(1024)]);
    let outcome = run_epochs(
        &mut model,
        train_idx.len(),
        cfg,
        |m: &mut Mlp, rows| {
            let ids: Vec<usize> = rows.iter().map(|&r| train_idx[r]).collect();
            let xa = gather(&pairs.x, &ids);
            let xb = gather(&pairs.x_tilde, &ids);
            let ta = m.forward(&xa);
            let tb = m.forward(&xb);
            let (loss, ga, gb) = info_nce(&ta.output, &tb.output, cfg.tau);
            let mut grads = vec![0.0; m.n_params()];
            m.backward(&ta, &ga, &mut grads);
            m.backward(&tb, &gb, &mut grads);
            let mut p = m.params();
            opt.step(&mut p, &grads);
            m.set_params(&p);
            loss
        },
        |m| {
            // Fixed-size validation batches keep the InfoNCE scale comparable.
            let k = cfg.batch_size.min(val_a.nrows()).max(2);
            let mut total = 0.0;
            let mut count = 0;
            let mut start = 0;
            while start + k <= val_a.nrows() {
                let a = m.eval(&val_a.rows(start, k).into_owned());
                let b = m.eval(&val_b.rows(start, k).into_owned());
                total += info_nce(&a, &b, cfg.tau).0;
                count += 1;
                start += k;
            }
            if count == 0 {
                let a = m.eval(&val_a);
                let b = m.eval(&val_b);
                return info_nce(&a, &b, cfg.tau).0;
            }
            total / count as f64
        },
        |m| {
            let out = m.eval(&probe);
            let low = out.column_iter().any(|c| {
                let v: Vec<f64> = c.iter().copied().collect();
                crate::stats::variance(&v) < COLLAPSE_VARIANCE
            });
            low_var_epochs = if low { low_var_epochs + 1 } else { 0 };
            if low_var_epochs == COLLAPSE_EPOCHS {
                log::warn!("encoder output collapsed: per-coordinate variance below {COLLAPSE_VARIANCE:e} for {COLLAPSE_EPOCHS} epochs");
                return true;
            }
            false
        },
    );
    Ok(outcome)
}

/// Minimizes the squared distance between the first `n_c` outputs of an
/// invertible flow across paired views.
pub fn train_align_invertible(flow: FlowModel, pairs: &PairData, n_c: usize, cfg: &TrainConfig) -> Result<TrainOutcome<FlowModel>> {
    cfg.validate()?;
    if n_c == 0 || n_c > flow.dim || pairs.x.ncols() != flow.dim {
        return Err(Error::Dimension(format!("n_c = {n_c} invalid for a {}-dimensional flow", flow.dim)));
    }
    let (train_idx, val_idx) = split_rows(pairs.len(), cfg.val_fraction, cfg.seed);
    let val_a = gather(&pairs.x, &val_idx);
    let val_b = gather(&pairs.x_tilde, &val_idx);
    let mut opt = Adam::new(cfg.adam, flow.n_params());
    let mut model = flow;
    let outcome = run_epochs(
        &mut model,
        train_idx.len(),
        cfg,
        |m: &mut FlowModel, rows| {
            let ids: Vec<usize> = rows.iter().map(|&r| train_idx[r]).collect();
            let xa = gather(&pairs.x, &ids);
            let xb = gather(&pairs.x_tilde, &ids);
            let ta = m.encode_batch(&xa);
            let tb = m.encode_batch(&xb);
            let k = ids.len() as f64;
            let mut ga = DMatrix::zeros(ids.len(), m.dim);
            let mut loss = 0.0;
            for r in 0..ids.len() {
                for c in 0..n_c {
                    let d = ta.z[(r, c)] - tb.z[(r, c)];
                    loss += d * d;
                    ga[(r, c)] = 2.0 * d / k;
                }
            }
            let zero = DVector::zeros(ids.len());
            let (_, mut grads) = m.backward(&ta, &ga, &zero);
            let (_, gb) = m.backward(&tb, &(-ga), &zero);
            for (g, h) in grads.iter_mut().zip(gb) {
                *g += h;
            }
            let mut p = m.params();
            opt.step(&mut p, &grads);
            m.set_params(&p);
            loss / k
        },
        |m| {
            let a = m.encode_batch(&val_a).z.columns(0, n_c).into_owned();
            let b = m.encode_batch(&val_b).z.columns(0, n_c).into_owned();
            alignment(&a, &b)
        },
        |_| false,
    );
    Ok(outcome)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand_distr::StandardNormal;

    fn random_flow(seed: u64, dim: usize, head: bool) -> FlowModel {
        let mut rng = rng_from_seed(seed);
        let mut f = FlowModel::coupling(dim, 2, &[5], head, &mut rng);
        let p: Vec<f64> = (0..f.n_params()).map(|_| 0.3 * rng.sample::<f64, _>(StandardNormal)).collect();
        f.set_params(&p);
        f
    }

    #[test]
    fn identity_flow_density() {
        let f = FlowModel::identity(2);
        assert!((f.log_density(BaseDensity::StandardNormal, &[0.0, 0.0]) + LN_2PI).abs() < 1e-15);
    }

    #[test]
    fn scaled_layer_density() {
        let f = FlowModel {
            dim: 1,
            layers: vec![FlowLayer::ElementwiseAffine { shift: vec![0.0], log_scale: vec![2f64.ln()] }],
            sigmoid_head: false,
        };
        let want = -0.5 * LN_2PI - 2f64.ln();
        assert!((f.log_density(BaseDensity::StandardNormal, &[0.0]) - want).abs() < 1e-15);
        assert_eq!(f.decode(&[1.5]).unwrap(), vec![3.0]);
    }

    #[test]
    fn batch_logdet_matches_jacobian() {
        let f = random_flow(7, 3, true);
        let x = [0.2, -1.0, 0.5];
        let (_, ld) = f.encode(&x);
        let (_, j) = f.encode_with_jacobian(&x);
        assert!((ld - j.determinant().abs().ln()).abs() < 1e-10);
    }

    #[test]
    fn info_nce_gradient_matches_finite_differences() {
        let mut rng = rng_from_seed(4);
        let a = DMatrix::from_fn(5, 2, |_, _| rng.random::<f64>());
        let b = DMatrix::from_fn(5, 2, |_, _| rng.random::<f64>());
        let (_, ga, gb) = info_nce(&a, &b, 0.5);
        for (m, g, is_a) in [(&a, &ga, true), (&b, &gb, false)] {
            for r in 0..5 {
                for c in 0..2 {
                    let mut p = m.clone();
                    let mut q = m.clone();
                    p[(r, c)] += 1e-6;
                    q[(r, c)] -= 1e-6;
                    let (lp, lq) = if is_a {
                        (info_nce(&p, &b, 0.5).0, info_nce(&q, &b, 0.5).0)
                    } else {
                        (info_nce(&a, &p, 0.5).0, info_nce(&a, &q, 0.5).0)
                    };
                    assert!(((lp - lq) / 2e-6 - g[(r, c)]).abs() < 1e-7);
                }
            }
        }
    }

    #[test]
    fn rejects_bad_config() {
        let cfg = TrainConfig { lambda: -1.0, ..Default::default() };
        assert!(cfg.validate().is_err());
        let cfg = TrainConfig { tau: 0.0, ..Default::default() };
        assert!(cfg.validate().is_err());
    }
}
