//! Desk-scale differentiable classifiers and heterogeneous client data.

mod dataset;
mod optim;
mod partition;
mod synthetic;

pub use dataset::{Dataset, DatasetId};
pub use optim::{LocalOptimizer, OptimizerKind};
pub use partition::{dirichlet_partition, dirichlet_partition_indices};
pub use synthetic::make_synthetic;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::ParamVector;
use crate::rng::{stream_rng, Stream};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ModelKind {
    /// Multinomial logistic regression.
    Logistic,
    /// One hidden ReLU layer.
    Mlp1 { hidden: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub kind: ModelKind,
    pub n_features: usize,
    pub n_classes: usize,
    pub l2: f64,
}

/// Loss value and its exact gradient.
#[derive(Debug, Clone, PartialEq)]
pub struct LossEval {
    pub loss: f64,
    pub gradient: ParamVector,
    pub n_samples_used: usize,
}

/// Which samples a loss evaluation uses.
#[derive(Debug, Clone, Copy)]
pub enum Batch<'a> {
    All,
    Indices(&'a [usize]),
}

impl ModelSpec {
    pub fn logistic(n_features: usize, n_classes: usize) -> Self {
        ModelSpec { kind: ModelKind::Logistic, n_features, n_classes, l2: 0.0 }
    }

    pub fn mlp1(n_features: usize, hidden: usize, n_classes: usize) -> Self {
        ModelSpec { kind: ModelKind::Mlp1 { hidden }, n_features, n_classes, l2: 0.0 }
    }

    pub fn with_l2(mut self, l2: f64) -> Self {
        self.l2 = l2;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_features == 0 || self.n_classes < 2 {
            return Err(Error::InvalidArgument("model needs n_features >= 1 and n_classes >= 2".into()));
        }
        if let ModelKind::Mlp1 { hidden: 0 } = self.kind {
            return Err(Error::InvalidArgument("mlp1 hidden width must be positive".into()));
        }
        if !(self.l2 >= 0.0 && self.l2.is_finite()) {
            return Err(Error::InvalidArgument(format!("l2 = {} must be >= 0", self.l2)));
        }
        Ok(())
    }

    /// Parameter dimension.
    pub fn dim(&self) -> usize {
        let (f, c) = (self.n_features, self.n_classes);
        match self.kind {
            ModelKind::Logistic => c * f + c,
            ModelKind::Mlp1 { hidden: h } => h * f + h + c * h + c,
        }
    }

    /// Uniform(±1/√fan_in) initialisation for every weight and bias.
    pub fn init_params(&self, seed: u64) -> ParamVector {
        let mut rng = stream_rng(seed, Stream::Init, &[]);
        let mut out = Vec::with_capacity(self.dim());
        let mut layer = |fan_in: usize, count: usize, out: &mut Vec<f64>| {
            let bound = 1.0 / (fan_in as f64).sqrt();
            for _ in 0..count {
                out.push(rng.random_range(-bound..bound));
            }
        };
        let (f, c) = (self.n_features, self.n_classes);
        match self.kind {
            ModelKind::Logistic => {
                layer(f, c * f + c, &mut out);
            }
            ModelKind::Mlp1 { hidden: h } => {
                layer(f, h * f + h, &mut out);
                layer(h, c * h + c, &mut out);
            }
        }
        ParamVector::from(out)
    }

    fn check(&self, theta: &ParamVector, data: &Dataset) -> Result<()> {
        if theta.dim() != self.dim() {
            return Err(Error::DimensionMismatch { left: theta.dim(), right: self.dim() });
        }
        if data.n_features() != self.n_features || data.n_classes() > self.n_classes {
            return Err(Error::InvalidDataset(format!(
                "dataset shape ({} features, {} classes) does not match model ({}, {})",
                data.n_features(),
                data.n_classes(),
                self.n_features,
                self.n_classes
            )));
        }
        Ok(())
    }
}

/// Writes the logits for `x` into `logits`; for `mlp1` also records the
/// post-activation hidden layer.
fn forward(spec: &ModelSpec, theta: &[f64], x: &[f64], hidden: &mut [f64], logits: &mut [f64]) {
    let (f, c) = (spec.n_features, spec.n_classes);
    match spec.kind {
        ModelKind::Logistic => {
            let (w, b) = theta.split_at(c * f);
            affine(w, b, x, logits);
        }
        ModelKind::Mlp1 { hidden: h } => {
            let (w1, rest) = theta.split_at(h * f);
            let (b1, rest) = rest.split_at(h);
            let (w2, b2) = rest.split_at(c * h);
            affine(w1, b1, x, hidden);
            for v in hidden.iter_mut() {
                *v = v.max(0.0);
            }
            affine(w2, b2, hidden, logits);
        }
    }
}

fn affine(w: &[f64], b: &[f64], x: &[f64], out: &mut [f64]) {
    let n_in = x.len();
    for (o, (row, bias)) in out.iter_mut().zip(w.chunks(n_in).zip(b)) {
        let mut acc = *bias;
        for (wi, xi) in row.iter().zip(x) {
            acc += wi * xi;
        }
        *o = acc;
    }
}

/// Turns logits into softmax probabilities in place and returns the
/// cross-entropy against `label`.
fn softmax_xent(logits: &mut [f64], label: usize) -> f64 {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let shifted_label = logits[label] - max;
    let mut sum = 0.0;
    for z in logits.iter_mut() {
        *z = (*z - max).exp();
        sum += *z;
    }
    for p in logits.iter_mut() {
        *p /= sum;
    }
    (sum.ln() - shifted_label).max(0.0)
}

fn hidden_width(spec: &ModelSpec) -> usize {
    match spec.kind {
        ModelKind::Logistic => 0,
        ModelKind::Mlp1 { hidden } => hidden,
    }
}

fn resolve_batch<'a>(data: &Dataset, batch: Batch<'a>) -> Result<BatchIter<'a>> {
    match batch {
        Batch::All => Ok(BatchIter::All(data.n_samples())),
        Batch::Indices(idx) => {
            if idx.is_empty() {
                return Err(Error::EmptyBatch);
            }
            if let Some(&bad) = idx.iter().find(|&&i| i >= data.n_samples()) {
                return Err(Error::BatchIndex { index: bad, len: data.n_samples() });
            }
            Ok(BatchIter::Indices(idx))
        }
    }
}

enum BatchIter<'a> {
    All(usize),
    Indices(&'a [usize]),
}

impl BatchIter<'_> {
    fn len(&self) -> usize {
        match self {
            BatchIter::All(n) => *n,
            BatchIter::Indices(i) => i.len(),
        }
    }

    fn get(&self, k: usize) -> usize {
        match self {
            BatchIter::All(_) => k,
            BatchIter::Indices(i) => i[k],
        }
    }
}

/// Mean cross-entropy over the batch plus `l2/2·‖θ‖²`, with its analytic
/// gradient.
pub fn loss_and_grad(spec: &ModelSpec, theta: &ParamVector, data: &Dataset, batch: Batch<'_>) -> Result<LossEval> {
    spec.check(theta, data)?;
    let batch = resolve_batch(data, batch)?;
    let n = batch.len();
    if n == 0 {
        return Err(Error::EmptyBatch);
    }
    let (f, c, h) = (spec.n_features, spec.n_classes, hidden_width(spec));
    let th = theta.as_slice();
    let mut grad = vec![0.0; spec.dim()];
    let mut hidden = vec![0.0; h];
    let mut probs = vec![0.0; c];
    let mut dhidden = vec![0.0; h];
    let mut total = 0.0;
    let inv_n = 1.0 / n as f64;

    for k in 0..n {
        let i = batch.get(k);
        let x = data.row(i);
        let y = data.label(i);
        forward(spec, th, x, &mut hidden, &mut probs);
        total += softmax_xent(&mut probs, y);
        probs[y] -= 1.0;
        // probs now holds dL/dlogits for this sample
        match spec.kind {
            ModelKind::Logistic => {
                let (gw, gb) = grad.split_at_mut(c * f);
                outer_acc(gw, gb, &probs, x, inv_n);
            }
            ModelKind::Mlp1 { .. } => {
                let (gw1, rest) = grad.split_at_mut(h * f);
                let (gb1, rest) = rest.split_at_mut(h);
                let (gw2, gb2) = rest.split_at_mut(c * h);
                outer_acc(gw2, gb2, &probs, &hidden, inv_n);
                let w2 = &th[h * f + h..h * f + h + c * h];
                for (j, dh) in dhidden.iter_mut().enumerate() {
                    if hidden[j] > 0.0 {
                        let mut acc = 0.0;
                        for (o, d) in probs.iter().enumerate() {
                            acc += w2[o * h + j] * d;
                        }
                        *dh = acc;
                    } else {
                        *dh = 0.0;
                    }
                }
                outer_acc(gw1, gb1, &dhidden, x, inv_n);
            }
        }
    }

    let mut loss = total * inv_n;
    if spec.l2 > 0.0 {
        loss += 0.5 * spec.l2 * theta.norm_sq();
        for (g, t) in grad.iter_mut().zip(th) {
            *g += spec.l2 * t;
        }
    }
    Ok(LossEval { loss, gradient: ParamVector::from(grad), n_samples_used: n })
}

fn outer_acc(gw: &mut [f64], gb: &mut [f64], delta: &[f64], input: &[f64], scale: f64) {
    let n_in = input.len();
    for (o, d) in delta.iter().enumerate() {
        if *d == 0.0 {
            continue;
        }
        let s = d * scale;
        gb[o] += s;
        for (g, xi) in gw[o * n_in..(o + 1) * n_in].iter_mut().zip(input) {
            *g += s * xi;
        }
    }
}

/// [`loss_and_grad`] plus the proximal term `μ/2·‖θ − anchor‖²`.
pub fn prox_loss_and_grad(
    spec: &ModelSpec,
    theta: &ParamVector,
    anchor: &ParamVector,
    mu: f64,
    data: &Dataset,
    batch: Batch<'_>,
) -> Result<LossEval> {
    if !(mu >= 0.0) {
        return Err(Error::InvalidArgument(format!("mu = {mu} must be >= 0")));
    }
    if anchor.dim() != theta.dim() {
        return Err(Error::DimensionMismatch { left: theta.dim(), right: anchor.dim() });
    }
    let mut eval = loss_and_grad(spec, theta, data, batch)?;
    if mu > 0.0 {
        let diff = theta - anchor;
        eval.loss += 0.5 * mu * diff.norm_sq();
        eval.gradient.axpy(mu, &diff);
    }
    Ok(eval)
}

/// A differentiable per-sample objective that local training can minimise.
pub trait Objective {
    fn dim(&self) -> usize;
    fn n_samples(&self) -> usize;
    fn loss_and_grad(&self, theta: &ParamVector, batch: Batch<'_>) -> Result<LossEval>;
}

/// A model specification bound to one client's data.
#[derive(Debug, Clone, Copy)]
pub struct ModelObjective<'a> {
    pub spec: &'a ModelSpec,
    pub data: &'a Dataset,
}

impl<'a> ModelObjective<'a> {
    pub fn new(spec: &'a ModelSpec, data: &'a Dataset) -> Self {
        ModelObjective { spec, data }
    }
}

impl Objective for ModelObjective<'_> {
    fn dim(&self) -> usize {
        self.spec.dim()
    }

    fn n_samples(&self) -> usize {
        self.data.n_samples()
    }

    fn loss_and_grad(&self, theta: &ParamVector, batch: Batch<'_>) -> Result<LossEval> {
        loss_and_grad(self.spec, theta, self.data, batch)
    }
}

/// Full-batch mean loss and accuracy.
pub fn loss_and_accuracy(spec: &ModelSpec, theta: &ParamVector, data: &Dataset) -> Result<(f64, f64)> {
    spec.check(theta, data)?;
    let (c, h) = (spec.n_classes, hidden_width(spec));
    let mut hidden = vec![0.0; h];
    let mut probs = vec![0.0; c];
    let mut total = 0.0;
    let mut correct = 0usize;
    for i in 0..data.n_samples() {
        forward(spec, theta.as_slice(), data.row(i), &mut hidden, &mut probs);
        let pred = argmax(&probs);
        if pred == data.label(i) {
            correct += 1;
        }
        total += softmax_xent(&mut probs, data.label(i));
    }
    let n = data.n_samples() as f64;
    let mut loss = total / n;
    if spec.l2 > 0.0 {
        loss += 0.5 * spec.l2 * theta.norm_sq();
    }
    Ok((loss, correct as f64 / n))
}

/// Index of the first maximum, so ties resolve to the lowest class id.
fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}
