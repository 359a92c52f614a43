//! Trainable classifier heads with hand-written gradients.
//!
//! Parameters are kept in one flat buffer so gradients, finite-difference
//! checks and snapshots all share a single layout.

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::rng::StreamRng;

/// Numerically stable softmax.
pub fn softmax(z: &[f64]) -> Vec<f64> {
    let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = z.iter().map(|v| (v - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

pub fn log_softmax(z: &[f64]) -> Vec<f64> {
    let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + z.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
    z.iter().map(|v| v - lse).collect()
}

/// Index of the largest score; ties go to the lowest index.
pub fn argmax(scores: &[f64]) -> usize {
    let mut best = 0;
    for (i, &s) in scores.iter().enumerate() {
        if s > scores[best] {
            best = i;
        }
    }
    best
}

/// Cross-entropy of `logits` against `label` and its gradient w.r.t. the
/// logits, `softmax(z) - onehot(label)`.
pub fn cross_entropy(logits: &[f64], label: usize) -> (f64, Vec<f64>) {
    let logp = log_softmax(logits);
    let mut grad: Vec<f64> = logp.iter().map(|l| l.exp()).collect();
    grad[label] -= 1.0;
    (-logp[label], grad)
}

/// `T^2 * KL(softmax(teacher/T) || softmax(student/T))` and its gradient
/// w.r.t. the student logits, `T * (softmax(student/T) - softmax(teacher/T))`.
pub fn distillation(student: &[f64], teacher: &[f64], temperature: f64) -> (f64, Vec<f64>) {
    let scale = |z: &[f64]| z.iter().map(|v| v / temperature).collect::<Vec<_>>();
    let log_s = log_softmax(&scale(student));
    let log_t = log_softmax(&scale(teacher));
    let mut kl = 0.0;
    let mut grad = Vec::with_capacity(student.len());
    for (ls, lt) in log_s.iter().zip(&log_t) {
        let pt = lt.exp();
        if pt > 0.0 {
            kl += pt * (lt - ls);
        }
        grad.push(temperature * (ls.exp() - pt));
    }
    (temperature * temperature * kl, grad)
}

/// `scores = W x + b`, with `W` stored row-major (`n_classes x dim`).
#[derive(Debug, Clone, PartialEq)]
pub struct LinearHead {
    pub n_classes: usize,
    pub dim: usize,
    /// `[W (row-major) | b]`.
    pub params: Vec<f64>,
    /// Optimizer steps taken.
    pub steps: u64,
}

impl LinearHead {
    pub fn zeros(n_classes: usize, dim: usize) -> Self {
        Self {
            n_classes,
            dim,
            params: vec![0.0; n_classes * dim + n_classes],
            steps: 0,
        }
    }

    pub fn weights(&self) -> &[f64] {
        &self.params[..self.n_classes * self.dim]
    }

    pub fn bias(&self) -> &[f64] {
        &self.params[self.n_classes * self.dim..]
    }
}

/// One hidden rectifier layer followed by a linear output layer.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpHead {
    pub n_classes: usize,
    pub dim: usize,
    pub hidden: usize,
    /// `[W1 (hidden x dim) | b1 | W2 (n_classes x hidden) | b2]`.
    pub params: Vec<f64>,
    pub steps: u64,
}

impl MlpHead {
    /// He-initialized hidden layer, zero output layer.
    pub fn init(n_classes: usize, dim: usize, hidden: usize, rng: &mut StreamRng) -> Self {
        let mut params = vec![0.0; hidden * dim + hidden + n_classes * hidden + n_classes];
        let scale = (2.0 / dim as f64).sqrt();
        for p in &mut params[..hidden * dim] {
            *p = scale * rng.sample::<f64, _>(StandardNormal);
        }
        Self {
            n_classes,
            dim,
            hidden,
            params,
            steps: 0,
        }
    }

    fn offsets(&self) -> (usize, usize, usize) {
        let w1 = self.hidden * self.dim;
        let b1 = w1 + self.hidden;
        let w2 = b1 + self.n_classes * self.hidden;
        (w1, b1, w2)
    }

    fn hidden_act(&self, x: &[f64]) -> Vec<f64> {
        let (w1_end, b1_end, _) = self.offsets();
        let w1 = &self.params[..w1_end];
        let b1 = &self.params[w1_end..b1_end];
        (0..self.hidden)
            .map(|j| {
                let row = &w1[j * self.dim..(j + 1) * self.dim];
                let pre: f64 = row.iter().zip(x).map(|(w, v)| w * v).sum::<f64>() + b1[j];
                pre.max(0.0)
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Head {
    Linear(LinearHead),
    Mlp(MlpHead),
}

fn affine(w: &[f64], b: &[f64], x: &[f64]) -> Vec<f64> {
    let d = x.len();
    b.iter()
        .enumerate()
        .map(|(c, bc)| w[c * d..(c + 1) * d].iter().zip(x).map(|(a, v)| a * v).sum::<f64>() + bc)
        .collect()
}

impl Head {
    pub fn linear(n_classes: usize, dim: usize) -> Self {
        Head::Linear(LinearHead::zeros(n_classes, dim))
    }

    pub fn n_classes(&self) -> usize {
        match self {
            Head::Linear(h) => h.n_classes,
            Head::Mlp(h) => h.n_classes,
        }
    }

    pub fn dim(&self) -> usize {
        match self {
            Head::Linear(h) => h.dim,
            Head::Mlp(h) => h.dim,
        }
    }

    pub fn params(&self) -> &[f64] {
        match self {
            Head::Linear(h) => &h.params,
            Head::Mlp(h) => &h.params,
        }
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        match self {
            Head::Linear(h) => &mut h.params,
            Head::Mlp(h) => &mut h.params,
        }
    }

    pub fn steps(&self) -> u64 {
        match self {
            Head::Linear(h) => h.steps,
            Head::Mlp(h) => h.steps,
        }
    }

    pub fn same_shape(&self, other: &Head) -> bool {
        match (self, other) {
            (Head::Linear(a), Head::Linear(b)) => a.n_classes == b.n_classes && a.dim == b.dim,
            (Head::Mlp(a), Head::Mlp(b)) => a.n_classes == b.n_classes && a.dim == b.dim && a.hidden == b.hidden,
            _ => false,
        }
    }

    fn check_dim(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.dim() {
            return Err(Error::Shape {
                expected: self.dim(),
                actual: x.len(),
            });
        }
        Ok(())
    }

    /// Raw class scores for one feature vector.
    pub fn forward(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.check_dim(x)?;
        Ok(self.logits(x))
    }

    pub(crate) fn logits(&self, x: &[f64]) -> Vec<f64> {
        match self {
            Head::Linear(h) => {
                let split = h.n_classes * h.dim;
                affine(&h.params[..split], &h.params[split..], x)
            }
            Head::Mlp(h) => {
                let a = h.hidden_act(x);
                let (_, b1_end, w2_end) = h.offsets();
                affine(&h.params[b1_end..w2_end], &h.params[w2_end..], &a)
            }
        }
    }

    pub fn predict(&self, x: &[f64]) -> Result<usize> {
        Ok(argmax(&self.forward(x)?))
    }

    /// Adds `scale * d(logits)/d(params)^T dlogits` into `grad`.
    pub fn backward(&self, x: &[f64], dlogits: &[f64], scale: f64, grad: &mut [f64]) {
        match self {
            Head::Linear(h) => {
                let d = h.dim;
                let split = h.n_classes * d;
                for (c, &g) in dlogits.iter().enumerate() {
                    let g = g * scale;
                    if g == 0.0 {
                        continue;
                    }
                    for (gw, v) in grad[c * d..(c + 1) * d].iter_mut().zip(x) {
                        *gw += g * v;
                    }
                    grad[split + c] += g;
                }
            }
            Head::Mlp(h) => {
                let (w1_end, b1_end, w2_end) = h.offsets();
                let a = h.hidden_act(x);
                let w2 = &h.params[b1_end..w2_end];
                let mut da = vec![0.0; h.hidden];
                for (c, &g) in dlogits.iter().enumerate() {
                    let g = g * scale;
                    for j in 0..h.hidden {
                        grad[b1_end + c * h.hidden + j] += g * a[j];
                        da[j] += g * w2[c * h.hidden + j];
                    }
                    grad[w2_end + c] += g;
                }
                for j in 0..h.hidden {
                    if a[j] <= 0.0 {
                        continue;
                    }
                    for (k, v) in x.iter().enumerate() {
                        grad[j * h.dim + k] += da[j] * v;
                    }
                    grad[w1_end + j] += da[j];
                }
            }
        }
    }

    /// Plain gradient step.
    pub fn apply(&mut self, grad: &[f64], lr: f64) {
        for (p, g) in self.params_mut().iter_mut().zip(grad) {
            *p -= lr * g;
        }
        match self {
            Head::Linear(h) => h.steps += 1,
            Head::Mlp(h) => h.steps += 1,
        }
    }

    /// Cross-entropy gradient of one labelled sample restricted to the output
    /// layer parameters, flattened. Used as the GSS gradient signature.
    pub fn output_gradient(&self, x: &[f64], label: usize) -> Vec<f64> {
        let (_, dz) = cross_entropy(&self.logits(x), label);
        match self {
            Head::Linear(h) => {
                let mut g = vec![0.0; h.params.len()];
                self.backward(x, &dz, 1.0, &mut g);
                g
            }
            Head::Mlp(h) => {
                let a = h.hidden_act(x);
                let mut g = Vec::with_capacity(h.n_classes * (h.hidden + 1));
                for &gc in &dz {
                    g.extend(a.iter().map(|v| gc * v));
                }
                g.extend_from_slice(&dz);
                g
            }
        }
    }
}

/// One labelled training example with a loss weight.
#[derive(Debug, Clone)]
pub struct Example<'a> {
    pub x: &'a [f64],
    pub label: usize,
    pub weight: f64,
}

/// Mean cross-entropy over `batch` and its parameter gradient.
pub fn ce_objective(head: &Head, batch: &[(&[f64], usize)]) -> (f64, Vec<f64>) {
    let mut grad = vec![0.0; head.params().len()];
    let mut loss = 0.0;
    let scale = 1.0 / batch.len().max(1) as f64;
    for &(x, y) in batch {
        let (l, dz) = cross_entropy(&head.logits(x), y);
        loss += l * scale;
        head.backward(x, &dz, scale, &mut grad);
    }
    (loss, grad)
}

/// Cross-entropy weighted per example and normalized by the total weight,
/// so that duplicating an example equals doubling its weight.
pub fn weighted_ce_objective(head: &Head, batch: &[Example<'_>]) -> (f64, Vec<f64>) {
    let mut grad = vec![0.0; head.params().len()];
    let total: f64 = batch.iter().map(|e| e.weight).sum();
    if total <= 0.0 {
        return (0.0, grad);
    }
    let mut loss = 0.0;
    for e in batch {
        let (l, dz) = cross_entropy(&head.logits(e.x), e.label);
        let scale = e.weight / total;
        loss += l * scale;
        head.backward(e.x, &dz, scale, &mut grad);
    }
    (loss, grad)
}

/// Mean of `T^2 KL(teacher || student)` over `xs`.
pub fn kd_objective(student: &Head, teacher: &Head, xs: &[&[f64]], temperature: f64) -> (f64, Vec<f64>) {
    let mut grad = vec![0.0; student.params().len()];
    let mut loss = 0.0;
    let scale = 1.0 / xs.len().max(1) as f64;
    for &x in xs {
        let (l, dz) = distillation(&student.logits(x), &teacher.logits(x), temperature);
        loss += l * scale;
        student.backward(x, &dz, scale, &mut grad);
    }
    (loss, grad)
}

/// Learning-without-forgetting objective: mean over the batch of
/// `CE + lambda * T^2 * KL(teacher/T || student/T)`.
pub fn lwf_objective(student: &Head, teacher: &Head, batch: &[(&[f64], usize)], temperature: f64, lambda: f64) -> (f64, Vec<f64>) {
    let mut grad = vec![0.0; student.params().len()];
    let mut loss = 0.0;
    let scale = 1.0 / batch.len().max(1) as f64;
    for &(x, y) in batch {
        let z = student.logits(x);
        let (ce, mut dz) = cross_entropy(&z, y);
        loss += ce * scale;
        if lambda != 0.0 {
            let (kd, dkd) = distillation(&z, &teacher.logits(x), temperature);
            loss += lambda * kd * scale;
            dz.iter_mut().zip(&dkd).for_each(|(a, b)| *a += lambda * b);
        }
        student.backward(x, &dz, scale, &mut grad);
    }
    (loss, grad)
}
