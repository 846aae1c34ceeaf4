//! Two-layer perceptron with hand-written backward pass, plus the weighted
//! binary cross-entropy objective and a minibatch Adam loop shared by the
//! content detector and the instruction-relevance classifier.

use crate::error::{Error, Result};
use crate::tensor::ops::{gelu_grad, gelu_matrix, linear, sigmoid, FlopCounter};
use crate::tensor::{Matrix, Rng};

/// `x -> GELU(x·w1 + b1)·w2 + b2`.
#[derive(Clone, Debug, PartialEq)]
pub struct Mlp2 {
    pub w1: Matrix,
    pub b1: Vec<f64>,
    pub w2: Matrix,
    pub b2: Vec<f64>,
}

/// Intermediate activations kept for the backward pass.
#[derive(Clone, Debug)]
pub struct Mlp2Cache {
    pub pre: Matrix,
    pub act: Matrix,
    pub out: Matrix,
}

#[derive(Clone, Debug)]
pub struct Mlp2Grads {
    pub w1: Matrix,
    pub b1: Vec<f64>,
    pub w2: Matrix,
    pub b2: Vec<f64>,
    pub input: Matrix,
}

impl Mlp2 {
    pub fn new(input: usize, hidden: usize, output: usize, rng: &mut Rng) -> Self {
        // Biases share the bound of their weight matrix.
        let w1 = Matrix::init_weight(input, hidden, rng);
        let bound1 = 1.0 / (input as f64).sqrt();
        let b1 = (0..hidden).map(|_| rng.uniform(-bound1, bound1)).collect();
        let w2 = Matrix::init_weight(hidden, output, rng);
        let bound2 = 1.0 / (hidden as f64).sqrt();
        let b2 = (0..output).map(|_| rng.uniform(-bound2, bound2)).collect();
        Self { w1, b1, w2, b2 }
    }

    pub fn zeros(input: usize, hidden: usize, output: usize) -> Self {
        Self {
            w1: Matrix::zeros(input, hidden),
            b1: vec![0.0; hidden],
            w2: Matrix::zeros(hidden, output),
            b2: vec![0.0; output],
        }
    }

    pub fn input_dim(&self) -> usize {
        self.w1.rows()
    }

    pub fn hidden_dim(&self) -> usize {
        self.w1.cols()
    }

    pub fn output_dim(&self) -> usize {
        self.w2.cols()
    }

    pub fn param_count(&self) -> usize {
        self.w1.data().len() + self.b1.len() + self.w2.data().len() + self.b2.len()
    }

    pub fn forward_cached(&self, x: &Matrix, fc: &mut FlopCounter) -> Result<Mlp2Cache> {
        if self.b1.len() != self.w1.cols() || self.w2.rows() != self.w1.cols() {
            return Err(Error::Shape {
                op: "mlp2 weights",
                left: self.w1.shape(),
                right: self.w2.shape(),
            });
        }
        let pre = linear(x, &self.w1, &self.b1, fc)?;
        let act = gelu_matrix(&pre, fc);
        let out = linear(&act, &self.w2, &self.b2, fc)?;
        Ok(Mlp2Cache { pre, act, out })
    }

    pub fn forward(&self, x: &Matrix, fc: &mut FlopCounter) -> Result<Matrix> {
        Ok(self.forward_cached(x, fc)?.out)
    }

    /// Sigmoid of the single output unit, one probability per row.
    pub fn predict_proba(&self, x: &Matrix, fc: &mut FlopCounter) -> Result<Vec<f64>> {
        if self.output_dim() != 1 {
            return Err(Error::Config(format!(
                "classifier head must have one output, has {}",
                self.output_dim()
            )));
        }
        let out = self.forward(x, fc)?;
        fc.charge(out.rows() as u64);
        Ok(out.data().iter().map(|&z| sigmoid(z)).collect())
    }

    /// Gradients of a scalar loss given `d_out = dL/d(output)`.
    pub fn backward(&self, x: &Matrix, cache: &Mlp2Cache, d_out: &Matrix) -> Result<Mlp2Grads> {
        if d_out.shape() != cache.out.shape() {
            return Err(Error::Shape {
                op: "mlp2_backward",
                left: d_out.shape(),
                right: cache.out.shape(),
            });
        }
        let w2 = cache.act.transpose().matmul(d_out)?;
        let b2 = column_sums(d_out);
        let mut d_pre = d_out.matmul(&self.w2.transpose())?;
        for (g, &p) in d_pre.data_mut().iter_mut().zip(cache.pre.data()) {
            *g *= gelu_grad(p);
        }
        let w1 = x.transpose().matmul(&d_pre)?;
        let b1 = column_sums(&d_pre);
        let input = d_pre.matmul(&self.w1.transpose())?;
        Ok(Mlp2Grads {
            w1,
            b1,
            w2,
            b2,
            input,
        })
    }

    /// Weighted BCE over the single sigmoid output, with its gradients.
    pub fn bce_gradients(
        &self,
        x: &Matrix,
        labels: &[f64],
        weights: &[f64],
    ) -> Result<(f64, Mlp2Grads)> {
        let cache = self.forward_cached(x, &mut FlopCounter::disabled())?;
        let (loss, dz) = bce_with_logits(cache.out.data(), labels, weights)?;
        let d_out = Matrix::from_vec(cache.out.rows(), 1, dz)?;
        let grads = self.backward(x, &cache, &d_out)?;
        Ok((loss, grads))
    }

    /// Weighted BCE loss only.
    pub fn bce_loss(&self, x: &Matrix, labels: &[f64], weights: &[f64]) -> Result<f64> {
        let out = self.forward(x, &mut FlopCounter::disabled())?;
        Ok(bce_with_logits(out.data(), labels, weights)?.0)
    }

    fn params_mut(&mut self) -> [&mut [f64]; 4] {
        [
            self.w1.data_mut(),
            &mut self.b1,
            self.w2.data_mut(),
            &mut self.b2,
        ]
    }

    /// Flat parameter view in the order w1, b1, w2, b2 (row-major).
    pub fn flat_params(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(self.param_count());
        v.extend_from_slice(self.w1.data());
        v.extend_from_slice(&self.b1);
        v.extend_from_slice(self.w2.data());
        v.extend_from_slice(&self.b2);
        v
    }

    pub fn set_flat_params(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.param_count() {
            return Err(Error::Length {
                op: "mlp2 params",
                expected: self.param_count(),
                actual: flat.len(),
            });
        }
        let mut off = 0;
        for p in self.params_mut() {
            let n = p.len();
            p.copy_from_slice(&flat[off..off + n]);
            off += n;
        }
        Ok(())
    }
}

impl Mlp2Grads {
    pub fn flat(&self) -> Vec<f64> {
        let mut v = Vec::new();
        v.extend_from_slice(self.w1.data());
        v.extend_from_slice(&self.b1);
        v.extend_from_slice(self.w2.data());
        v.extend_from_slice(&self.b2);
        v
    }
}

fn column_sums(m: &Matrix) -> Vec<f64> {
    let mut s = vec![0.0; m.cols()];
    for r in 0..m.rows() {
        for (acc, v) in s.iter_mut().zip(m.row(r)) {
            *acc += v;
        }
    }
    s
}

/// Weighted mean binary cross-entropy on logits:
/// `Σ w_i·bce(z_i, y_i) / Σ w_i`, and its gradient with respect to each logit,
/// `w_i·(σ(z_i) − y_i) / Σ w_i`.
pub fn bce_with_logits(logits: &[f64], labels: &[f64], weights: &[f64]) -> Result<(f64, Vec<f64>)> {
    if labels.len() != logits.len() || weights.len() != logits.len() {
        return Err(Error::Length {
            op: "bce",
            expected: logits.len(),
            actual: labels.len().min(weights.len()),
        });
    }
    let total: f64 = weights.iter().sum();
    if total <= 0.0 {
        return Err(Error::Config("bce weights must have positive sum".into()));
    }
    let mut loss = 0.0;
    let mut grad = Vec::with_capacity(logits.len());
    for ((&z, &y), &w) in logits.iter().zip(labels).zip(weights) {
        // max(z,0) − z·y + ln(1 + e^{−|z|})
        loss += w * (z.max(0.0) - z * y + (-z.abs()).exp().ln_1p());
        grad.push(w * (sigmoid(z) - y) / total);
    }
    Ok((loss / total, grad))
}

/// Adam, over the parameter blocks of an [`Mlp2`] or any flat vector.
#[derive(Clone, Debug)]
pub struct Adam {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    t: i32,
    m: Vec<f64>,
    v: Vec<f64>,
}

impl Adam {
    pub fn new(lr: f64, n_params: usize) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: vec![0.0; n_params],
            v: vec![0.0; n_params],
        }
    }

    pub fn step(&mut self, model: &mut Mlp2, grads: &Mlp2Grads) {
        let (bc1, bc2) = self.tick();
        let gblocks: [&[f64]; 4] = [grads.w1.data(), &grads.b1, grads.w2.data(), &grads.b2];
        let mut off = 0;
        for (p, g) in model.params_mut().into_iter().zip(gblocks) {
            self.update(off, p, g, bc1, bc2);
            off += p.len();
        }
    }

    /// One step over a flat parameter vector.
    pub fn step_flat(&mut self, params: &mut [f64], grads: &[f64]) {
        assert_eq!(params.len(), grads.len());
        let (bc1, bc2) = self.tick();
        self.update(0, params, grads, bc1, bc2);
    }

    fn tick(&mut self) -> (f64, f64) {
        self.t += 1;
        (1.0 - self.beta1.powi(self.t), 1.0 - self.beta2.powi(self.t))
    }

    fn update(&mut self, off: usize, p: &mut [f64], g: &[f64], bc1: f64, bc2: f64) {
        for (i, (pv, &gv)) in p.iter_mut().zip(g).enumerate() {
            let m = &mut self.m[off + i];
            let v = &mut self.v[off + i];
            *m = self.beta1 * *m + (1.0 - self.beta1) * gv;
            *v = self.beta2 * *v + (1.0 - self.beta2) * gv * gv;
            *pv -= self.lr * (*m / bc1) / ((*v / bc2).sqrt() + self.eps);
        }
    }
}

/// How positive examples are weighted against negatives.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ClassWeighting {
    Uniform,
    /// Positives weighted by `negatives / positives`; falls back to uniform
    /// when either class is absent.
    Balanced,
}

#[derive(Clone, Debug)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub seed: u64,
    pub weighting: ClassWeighting,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 20,
            lr: 1e-2,
            batch_size: 256,
            seed: 0,
            weighting: ClassWeighting::Balanced,
        }
    }
}

pub fn sample_weights(labels: &[f64], weighting: ClassWeighting) -> Vec<f64> {
    let pos = labels.iter().filter(|&&y| y >= 0.5).count();
    let neg = labels.len() - pos;
    let pos_w = match weighting {
        ClassWeighting::Balanced if pos > 0 && neg > 0 => neg as f64 / pos as f64,
        _ => 1.0,
    };
    labels
        .iter()
        .map(|&y| if y >= 0.5 { pos_w } else { 1.0 })
        .collect()
}

/// Trains the sigmoid head of `model` on rows of `features`.
///
/// Returns the full-set weighted loss before training and after each epoch,
/// so the curve has `epochs + 1` entries.
pub fn train_binary(
    model: &mut Mlp2,
    features: &Matrix,
    labels: &[f64],
    cfg: &TrainConfig,
) -> Result<Vec<f64>> {
    if labels.len() != features.rows() {
        return Err(Error::Length {
            op: "train_binary labels",
            expected: features.rows(),
            actual: labels.len(),
        });
    }
    if features.rows() == 0 {
        return Err(Error::Config("empty training set".into()));
    }
    let weights = sample_weights(labels, cfg.weighting);
    let mut adam = Adam::new(cfg.lr, model.param_count());
    let mut rng = Rng::new(cfg.seed);
    let mut order: Vec<usize> = (0..features.rows()).collect();
    let batch = cfg.batch_size.max(1);

    let check = |loss: f64, epoch: usize| -> Result<f64> {
        if loss.is_finite() {
            Ok(loss)
        } else {
            Err(Error::NonFiniteLoss {
                epoch,
                detail: format!("loss = {loss}"),
            })
        }
    };

    let mut curve = vec![check(model.bce_loss(features, labels, &weights)?, 0)?];
    for epoch in 1..=cfg.epochs {
        rng.shuffle(&mut order);
        for chunk in order.chunks(batch) {
            let x = features.select_rows(chunk);
            let y: Vec<f64> = chunk.iter().map(|&i| labels[i]).collect();
            let w: Vec<f64> = chunk.iter().map(|&i| weights[i]).collect();
            let (loss, grads) = model.bce_gradients(&x, &y, &w)?;
            check(loss, epoch)?;
            adam.step(model, &grads);
        }
        curve.push(check(model.bce_loss(features, labels, &weights)?, epoch)?);
    }
    Ok(curve)
}
