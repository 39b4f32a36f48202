//! From-scratch differentiable classifier: a linear softmax model or a
//! one-hidden-layer tanh MLP, with hand-derived gradients, SGD with
//! momentum, and the per-step backward-pass budget ledger.
//!
//! All linear algebra is written as plain index-ordered loops so that a
//! straight-line reimplementation of the same formulas reproduces results
//! bit for bit.

use std::io::{BufRead, Write};
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const DEFAULT_LEARNING_RATE: f64 = 0.005;
pub const DEFAULT_MOMENTUM: f64 = 0.9;
pub const DEFAULT_WEIGHT_DECAY: f64 = 1e-5;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("feature dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("label {label} out of range for {num_classes} classes")]
    LabelOutOfRange { label: usize, num_classes: usize },
    #[error("empty batch")]
    EmptyBatch,
    #[error("batch has {inputs} inputs but {labels} labels")]
    BatchMismatch { inputs: usize, labels: usize },
    #[error("parameter shapes do not match")]
    ShapeMismatch,
    #[error("budget exhausted: all {budget} unit(s) already spent this step")]
    BudgetExhausted { budget: u32 },
    #[error("checkpoint io: {0}")]
    CheckpointIo(#[from] std::io::Error),
    #[error("malformed checkpoint: {0}")]
    CheckpointFormat(String),
}

/// Model architecture. `Linear` uses the identity feature extractor; `Mlp`
/// exposes the tanh hidden activations as penultimate features.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Arch {
    Linear,
    Mlp { hidden: usize },
}

/// Architecture plus optimizer constants.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    #[serde(default = "default_arch")]
    pub arch: Arch,
    #[serde(default = "default_lr")]
    pub learning_rate: f64,
    #[serde(default = "default_momentum")]
    pub momentum: f64,
    #[serde(default = "default_weight_decay")]
    pub weight_decay: f64,
}

fn default_arch() -> Arch {
    Arch::Linear
}
fn default_lr() -> f64 {
    DEFAULT_LEARNING_RATE
}
fn default_momentum() -> f64 {
    DEFAULT_MOMENTUM
}
fn default_weight_decay() -> f64 {
    DEFAULT_WEIGHT_DECAY
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            arch: Arch::Linear,
            learning_rate: DEFAULT_LEARNING_RATE,
            momentum: DEFAULT_MOMENTUM,
            weight_decay: DEFAULT_WEIGHT_DECAY,
        }
    }
}

/// One dense layer, row-major `rows x cols` weights plus a bias per row.
#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    pub rows: usize,
    pub cols: usize,
    pub w: Vec<f64>,
    pub b: Vec<f64>,
}

impl Layer {
    fn zeros(rows: usize, cols: usize) -> Self {
        Layer {
            rows,
            cols,
            w: vec![0.0; rows * cols],
            b: vec![0.0; rows],
        }
    }
}

/// A full parameter set (also used for gradients and velocities, which share
/// the shape of the parameters they refer to).
#[derive(Debug, Clone, PartialEq)]
pub struct Params {
    pub layers: Vec<Layer>,
}

impl Params {
    pub fn zeros_like(&self) -> Params {
        Params {
            layers: self
                .layers
                .iter()
                .map(|l| Layer::zeros(l.rows, l.cols))
                .collect(),
        }
    }

    pub fn same_shape(&self, other: &Params) -> bool {
        self.layers.len() == other.layers.len()
            && self
                .layers
                .iter()
                .zip(&other.layers)
                .all(|(a, b)| a.rows == b.rows && a.cols == b.cols)
    }
}

/// Momentum/TTA clone of the main parameters.
#[derive(Debug, Clone)]
pub struct SurrogateModel {
    pub params: Params,
}

/// Classifier `f` with parameters and architecture metadata.
#[derive(Debug, Clone)]
pub struct Classifier {
    pub arch: Arch,
    pub input_dim: usize,
    pub num_classes: usize,
    pub params: Params,
}

#[derive(Debug, Clone)]
pub struct Prediction {
    /// Argmax labels, lowest index on ties.
    pub labels: Vec<usize>,
    /// Softmax class probabilities per sample.
    pub probabilities: Vec<Vec<f64>>,
    /// Penultimate features per sample: the input itself for `Linear`, the
    /// tanh hidden activations for `Mlp`.
    pub features: Vec<Vec<f64>>,
}

impl Classifier {
    /// Initialize with weights uniform in `[-1/sqrt(fan_in), +1/sqrt(fan_in)]`
    /// and zero biases.
    pub fn init<R: Rng>(arch: Arch, input_dim: usize, num_classes: usize, rng: &mut R) -> Self {
        let shapes: Vec<(usize, usize)> = match arch {
            Arch::Linear => vec![(num_classes, input_dim)],
            Arch::Mlp { hidden } => vec![(hidden, input_dim), (num_classes, hidden)],
        };
        let layers = shapes
            .into_iter()
            .map(|(rows, cols)| {
                let bound = 1.0 / (cols as f64).sqrt();
                let w = (0..rows * cols)
                    .map(|_| rng.gen_range(-bound..bound))
                    .collect();
                Layer {
                    rows,
                    cols,
                    w,
                    b: vec![0.0; rows],
                }
            })
            .collect();
        Classifier {
            arch,
            input_dim,
            num_classes,
            params: Params { layers },
        }
    }

    /// The same classifier head over a different parameter set (surrogate or
    /// adaptation clone). Shapes must match.
    pub fn with_params(&self, params: Params) -> Classifier {
        assert!(self.params.same_shape(&params), "clone shape mismatch");
        Classifier {
            arch: self.arch,
            input_dim: self.input_dim,
            num_classes: self.num_classes,
            params,
        }
    }

    // Index-ordered loops keep the summation order canonical so independent
    // straight-line reimplementations reproduce results bit for bit.
    #[allow(clippy::needless_range_loop)]
    fn forward(&self, x: &[f64]) -> (Vec<f64>, Vec<f64>) {
        match self.arch {
            Arch::Linear => {
                let l = &self.params.layers[0];
                let mut logits = vec![0.0; l.rows];
                for k in 0..l.rows {
                    let mut acc = l.b[k];
                    for j in 0..l.cols {
                        acc += l.w[k * l.cols + j] * x[j];
                    }
                    logits[k] = acc;
                }
                (x.to_vec(), logits)
            }
            Arch::Mlp { hidden } => {
                let l1 = &self.params.layers[0];
                let l2 = &self.params.layers[1];
                let mut a = vec![0.0; hidden];
                for h in 0..hidden {
                    let mut acc = l1.b[h];
                    for j in 0..l1.cols {
                        acc += l1.w[h * l1.cols + j] * x[j];
                    }
                    a[h] = acc.tanh();
                }
                let mut logits = vec![0.0; l2.rows];
                for k in 0..l2.rows {
                    let mut acc = l2.b[k];
                    for h in 0..hidden {
                        acc += l2.w[k * l2.cols + h] * a[h];
                    }
                    logits[k] = acc;
                }
                (a, logits)
            }
        }
    }

    /// Predict labels, probabilities, and penultimate features for a batch.
    pub fn predict(&self, inputs: &[Vec<f64>]) -> Result<Prediction, ModelError> {
        let mut labels = Vec::with_capacity(inputs.len());
        let mut probabilities = Vec::with_capacity(inputs.len());
        let mut features = Vec::with_capacity(inputs.len());
        for x in inputs {
            if x.len() != self.input_dim {
                return Err(ModelError::DimensionMismatch {
                    expected: self.input_dim,
                    got: x.len(),
                });
            }
            let (feat, logits) = self.forward(x);
            let probs = softmax(&logits);
            labels.push(argmax(&probs));
            probabilities.push(probs);
            features.push(feat);
        }
        Ok(Prediction {
            labels,
            probabilities,
            features,
        })
    }
}

fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&z| (z - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

/// `log softmax` computed from the logits directly, for loss values.
fn log_softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = max
        + logits
            .iter()
            .map(|&z| (z - max).exp())
            .sum::<f64>()
            .ln();
    logits.iter().map(|&z| z - lse).collect()
}

fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// What a spent budget unit paid for.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum UnitKind {
    /// A cross-entropy backward pass.
    Supervised,
    /// An entropy-minimization backward pass.
    Adaptation,
}

/// Counts backward-pass units against the per-step budget `C`. A fresh ledger
/// is created at every stream step; overspending is refused without mutating
/// any state.
#[derive(Debug, Clone)]
pub struct BudgetLedger {
    budget: u32,
    spent: Vec<UnitKind>,
}

impl BudgetLedger {
    pub fn new(budget: u32) -> Self {
        BudgetLedger {
            budget,
            spent: Vec::with_capacity(budget as usize),
        }
    }

    pub fn budget(&self) -> u32 {
        self.budget
    }

    pub fn used(&self) -> u32 {
        self.spent.len() as u32
    }

    pub fn remaining(&self) -> u32 {
        self.budget - self.used()
    }

    pub fn kinds(&self) -> &[UnitKind] {
        &self.spent
    }

    pub fn try_spend(&mut self, kind: UnitKind) -> Result<(), ModelError> {
        if self.used() >= self.budget {
            return Err(ModelError::BudgetExhausted {
                budget: self.budget,
            });
        }
        self.spent.push(kind);
        Ok(())
    }
}

fn check_batch(clf: &Classifier, inputs: &[Vec<f64>]) -> Result<(), ModelError> {
    if inputs.is_empty() {
        return Err(ModelError::EmptyBatch);
    }
    for x in inputs {
        if x.len() != clf.input_dim {
            return Err(ModelError::DimensionMismatch {
                expected: clf.input_dim,
                got: x.len(),
            });
        }
    }
    Ok(())
}

/// Backpropagate per-sample logit gradients through the network.
#[allow(clippy::needless_range_loop)]
fn backward_from_dlogits(
    clf: &Classifier,
    inputs: &[Vec<f64>],
    hidden: &[Vec<f64>],
    dlogits: &[Vec<f64>],
) -> Params {
    let mut grad = clf.params.zeros_like();
    match clf.arch {
        Arch::Linear => {
            let g = &mut grad.layers[0];
            for (x, dl) in inputs.iter().zip(dlogits) {
                for k in 0..g.rows {
                    g.b[k] += dl[k];
                    for j in 0..g.cols {
                        g.w[k * g.cols + j] += dl[k] * x[j];
                    }
                }
            }
        }
        Arch::Mlp { hidden: width } => {
            let w2 = clf.params.layers[1].w.clone();
            let (g1, g2) = {
                let (a, b) = grad.layers.split_at_mut(1);
                (&mut a[0], &mut b[0])
            };
            for ((x, a), dl) in inputs.iter().zip(hidden).zip(dlogits) {
                for k in 0..g2.rows {
                    g2.b[k] += dl[k];
                    for h in 0..width {
                        g2.w[k * g2.cols + h] += dl[k] * a[h];
                    }
                }
                for h in 0..width {
                    let mut da = 0.0;
                    for k in 0..g2.rows {
                        da += w2[k * width + h] * dl[k];
                    }
                    let dz = da * (1.0 - a[h] * a[h]);
                    g1.b[h] += dz;
                    for j in 0..g1.cols {
                        g1.w[h * g1.cols + j] += dz * x[j];
                    }
                }
            }
        }
    }
    grad
}

/// Mean cross-entropy loss and its gradient w.r.t. the parameters.
/// Spends one budget unit; refuses (touching nothing) when the ledger is full.
pub fn cross_entropy_backward(
    clf: &Classifier,
    inputs: &[Vec<f64>],
    labels: &[usize],
    ledger: &mut BudgetLedger,
) -> Result<(f64, Params), ModelError> {
    check_batch(clf, inputs)?;
    if inputs.len() != labels.len() {
        return Err(ModelError::BatchMismatch {
            inputs: inputs.len(),
            labels: labels.len(),
        });
    }
    for &y in labels {
        if y >= clf.num_classes {
            return Err(ModelError::LabelOutOfRange {
                label: y,
                num_classes: clf.num_classes,
            });
        }
    }
    ledger.try_spend(UnitKind::Supervised)?;

    let batch = inputs.len() as f64;
    let mut loss = 0.0;
    let mut hidden = Vec::with_capacity(inputs.len());
    let mut dlogits = Vec::with_capacity(inputs.len());
    for (x, &y) in inputs.iter().zip(labels) {
        let (feat, logits) = clf.forward(x);
        let logp = log_softmax(&logits);
        loss -= logp[y] / batch;
        let mut dl: Vec<f64> = logp.iter().map(|&lp| lp.exp() / batch).collect();
        dl[y] -= 1.0 / batch;
        hidden.push(feat);
        dlogits.push(dl);
    }
    let grad = backward_from_dlogits(clf, inputs, &hidden, &dlogits);
    Ok((loss, grad))
}

/// Mean prediction entropy and its gradient w.r.t. the parameters.
/// Spends one budget unit.
pub fn entropy_backward(
    clf: &Classifier,
    inputs: &[Vec<f64>],
    ledger: &mut BudgetLedger,
) -> Result<(f64, Params), ModelError> {
    check_batch(clf, inputs)?;
    ledger.try_spend(UnitKind::Adaptation)?;

    let batch = inputs.len() as f64;
    let mut loss = 0.0;
    let mut hidden = Vec::with_capacity(inputs.len());
    let mut dlogits = Vec::with_capacity(inputs.len());
    for x in inputs {
        let (feat, logits) = clf.forward(x);
        let logp = log_softmax(&logits);
        let mut entropy = 0.0;
        for &lp in &logp {
            entropy -= lp.exp() * lp;
        }
        loss += entropy / batch;
        // dH/dz_k = -p_k (log p_k + H)
        let dl: Vec<f64> = logp
            .iter()
            .map(|&lp| -lp.exp() * (lp + entropy) / batch)
            .collect();
        hidden.push(feat);
        dlogits.push(dl);
    }
    let grad = backward_from_dlogits(clf, inputs, &hidden, &dlogits);
    Ok((loss, grad))
}

/// SGD with momentum and weight decay.
#[derive(Debug, Clone)]
pub struct OptimizerState {
    pub learning_rate: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub velocity: Params,
}

impl OptimizerState {
    pub fn new(learning_rate: f64, momentum: f64, weight_decay: f64, params: &Params) -> Self {
        OptimizerState {
            learning_rate,
            momentum,
            weight_decay,
            velocity: params.zeros_like(),
        }
    }
}

/// One step: `g' = g + wd * theta; v = m * v + g'; theta -= lr * v`.
pub fn sgd_step(opt: &mut OptimizerState, params: &mut Params, grad: &Params) {
    debug_assert!(params.same_shape(grad) && params.same_shape(&opt.velocity));
    for ((pl, gl), vl) in params
        .layers
        .iter_mut()
        .zip(&grad.layers)
        .zip(opt.velocity.layers.iter_mut())
    {
        for i in 0..pl.w.len() {
            let g = gl.w[i] + opt.weight_decay * pl.w[i];
            vl.w[i] = opt.momentum * vl.w[i] + g;
            pl.w[i] -= opt.learning_rate * vl.w[i];
        }
        for i in 0..pl.b.len() {
            let g = gl.b[i] + opt.weight_decay * pl.b[i];
            vl.b[i] = opt.momentum * vl.b[i] + g;
            pl.b[i] -= opt.learning_rate * vl.b[i];
        }
    }
}

/// Elementwise `phi = lambda * phi + (1 - lambda) * theta`.
pub fn momentum_clone_update(phi: &mut Params, theta: &Params, lambda: f64) -> Result<(), ModelError> {
    if !phi.same_shape(theta) {
        return Err(ModelError::ShapeMismatch);
    }
    assert!((0.0..=1.0).contains(&lambda), "lambda must be in [0, 1]");
    for (pl, tl) in phi.layers.iter_mut().zip(&theta.layers) {
        for i in 0..pl.w.len() {
            pl.w[i] = lambda * pl.w[i] + (1.0 - lambda) * tl.w[i];
        }
        for i in 0..pl.b.len() {
            pl.b[i] = lambda * pl.b[i] + (1.0 - lambda) * tl.b[i];
        }
    }
    Ok(())
}

/// One entropy-minimization step on a clone: `phi = theta - eps * grad(H)`.
/// The classifier's own parameters are never touched; the backward pass
/// counts one budget unit.
pub fn tta_adapt_clone(
    clf: &Classifier,
    inputs: &[Vec<f64>],
    epsilon: f64,
    ledger: &mut BudgetLedger,
) -> Result<Params, ModelError> {
    let (_entropy, grad) = entropy_backward(clf, inputs, ledger)?;
    let mut phi = clf.params.clone();
    for (pl, gl) in phi.layers.iter_mut().zip(&grad.layers) {
        for i in 0..pl.w.len() {
            pl.w[i] -= epsilon * gl.w[i];
        }
        for i in 0..pl.b.len() {
            pl.b[i] -= epsilon * gl.b[i];
        }
    }
    Ok(phi)
}

/// Write parameters as flat CSV `name,row,col,value` (biases use col 0).
pub fn save_checkpoint(clf: &Classifier, path: &Path) -> Result<(), ModelError> {
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(w, "name,row,col,value")?;
    for (idx, layer) in clf.params.layers.iter().enumerate() {
        for r in 0..layer.rows {
            for c in 0..layer.cols {
                writeln!(w, "w{idx},{r},{c},{}", layer.w[r * layer.cols + c])?;
            }
        }
        for r in 0..layer.rows {
            writeln!(w, "b{idx},{r},0,{}", layer.b[r])?;
        }
    }
    Ok(())
}

/// Load a checkpoint written by [`save_checkpoint`] into a classifier of the
/// same shape.
pub fn load_checkpoint(clf: &mut Classifier, path: &Path) -> Result<(), ModelError> {
    let file = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut lines = file.lines();
    match lines.next() {
        Some(Ok(h)) if h == "name,row,col,value" => {}
        _ => {
            return Err(ModelError::CheckpointFormat(
                "missing `name,row,col,value` header".to_string(),
            ))
        }
    }
    let bad = |line: usize, msg: &str| ModelError::CheckpointFormat(format!("line {line}: {msg}"));
    for (i, line) in lines.enumerate() {
        let lineno = i + 2;
        let line = line?;
        let parts: Vec<&str> = line.split(',').collect();
        if parts.len() != 4 {
            return Err(bad(lineno, "expected 4 fields"));
        }
        let name = parts[0];
        let row: usize = parts[1].parse().map_err(|_| bad(lineno, "bad row"))?;
        let col: usize = parts[2].parse().map_err(|_| bad(lineno, "bad col"))?;
        let value: f64 = parts[3].parse().map_err(|_| bad(lineno, "bad value"))?;
        let (kind, idx) = name.split_at(1);
        let idx: usize = idx.parse().map_err(|_| bad(lineno, "bad tensor name"))?;
        let layer = clf
            .params
            .layers
            .get_mut(idx)
            .ok_or_else(|| bad(lineno, "tensor index out of range"))?;
        match kind {
            "w" => {
                if row >= layer.rows || col >= layer.cols {
                    return Err(bad(lineno, "weight index out of range"));
                }
                layer.w[row * layer.cols + col] = value;
            }
            "b" => {
                if row >= layer.rows || col != 0 {
                    return Err(bad(lineno, "bias index out of range"));
                }
                layer.b[row] = value;
            }
            _ => return Err(bad(lineno, "tensor name must start with w or b")),
        }
    }
    Ok(())
}
