//! Pooled linear head, its losses and their analytic gradients.
//!
//! A prediction is `sigmoid(W · gmp(F) + b)` where `gmp` is global max pooling
//! over a feature map `F`. The objective over a spliced batch is the per-class
//! BCE summed over regular and mixed samples, plus (in consistency mode) the
//! soft-target BCE between each sub-image prediction and the detached
//! prediction of the regular image it came from. All loss and gradient math is
//! `f64`; losses are sums, never means.

use serde::{Deserialize, Serialize};

use crate::augment::{BatchPlan, GridSpec, MultiHotLabel};
use crate::error::{Error, Result};
use crate::rng::SeededStream;
use crate::tensor::{extract_cell, grid_compose, ImageTensor};

/// Probabilities are clamped to `[PROB_EPS, 1 − PROB_EPS]` before logarithms.
pub const PROB_EPS: f64 = 1e-7;

/// Per-channel spatial maximum.
pub fn global_max_pool(features: &ImageTensor) -> Vec<f64> {
    (0..features.channels())
        .map(|ch| {
            features
                .channel(ch)
                .iter()
                .fold(f32::NEG_INFINITY, |m, &v| m.max(v)) as f64
        })
        .collect()
}

pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// `−t·ln p − (1−t)·ln(1−p)` with `p` clamped.
pub fn soft_bce(p: f64, target: f64) -> f64 {
    let p = p.clamp(PROB_EPS, 1.0 - PROB_EPS);
    -target * p.ln() - (1.0 - target) * (1.0 - p).ln()
}

/// `classes × dim` weights (row-major) and a bias per class.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LinearHead {
    classes: usize,
    dim: usize,
    weights: Vec<f64>,
    bias: Vec<f64>,
}

impl LinearHead {
    pub fn new(classes: usize, dim: usize, weights: Vec<f64>, bias: Vec<f64>) -> Result<Self> {
        if weights.len() != classes * dim || bias.len() != classes {
            return Err(Error::Shape(format!(
                "head {classes}x{dim} given {} weights and {} biases",
                weights.len(),
                bias.len()
            )));
        }
        if weights.iter().chain(&bias).any(|v| !v.is_finite()) {
            return Err(Error::Shape("head has non-finite parameters".into()));
        }
        Ok(Self {
            classes,
            dim,
            weights,
            bias,
        })
    }

    pub fn zeros(classes: usize, dim: usize) -> Self {
        Self {
            classes,
            dim,
            weights: vec![0.0; classes * dim],
            bias: vec![0.0; classes],
        }
    }

    /// Weights uniform in `[−scale, scale)`, zero bias.
    pub fn random(classes: usize, dim: usize, scale: f64, rng: &mut SeededStream) -> Self {
        let weights = (0..classes * dim)
            .map(|_| rng.uniform(-scale, scale))
            .collect();
        Self {
            classes,
            dim,
            weights,
            bias: vec![0.0; classes],
        }
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn bias(&self) -> &[f64] {
        &self.bias
    }

    pub fn logits(&self, pooled: &[f64]) -> Result<Vec<f64>> {
        if pooled.len() != self.dim {
            return Err(Error::Shape(format!(
                "pooled feature has {} entries, head expects {}",
                pooled.len(),
                self.dim
            )));
        }
        Ok(self
            .weights
            .chunks_exact(self.dim)
            .zip(&self.bias)
            .map(|(row, b)| row.iter().zip(pooled).map(|(w, x)| w * x).sum::<f64>() + b)
            .collect())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Prediction {
    pub logits: Vec<f64>,
    pub probs: Vec<f64>,
}

impl Prediction {
    pub fn from_logits(logits: Vec<f64>) -> Self {
        let probs = logits.iter().map(|&z| sigmoid(z)).collect();
        Self { logits, probs }
    }
}

/// Predictions for a list of samples; `stop_grad` marks detached copies.
#[derive(Clone, Debug, PartialEq)]
pub struct PredictionSet {
    pub items: Vec<Prediction>,
    pub stop_grad: bool,
}

impl PredictionSet {
    pub fn new(items: Vec<Prediction>) -> Self {
        Self {
            items,
            stop_grad: false,
        }
    }

    /// Copy that acts as a constant target.
    pub fn detached(&self) -> Self {
        Self {
            items: self.items.clone(),
            stop_grad: true,
        }
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }
}

pub fn predict_pooled(head: &LinearHead, pooled: &[f64]) -> Result<Prediction> {
    Ok(Prediction::from_logits(head.logits(pooled)?))
}

pub fn predict(head: &LinearHead, features: &ImageTensor) -> Result<Prediction> {
    predict_pooled(head, &global_max_pool(features))
}

/// Per-class BCE summed over samples.
pub fn bce_loss(preds: &PredictionSet, labels: &[MultiHotLabel]) -> Result<Vec<f64>> {
    if preds.len() != labels.len() {
        return Err(Error::Shape(format!(
            "{} predictions for {} labels",
            preds.len(),
            labels.len()
        )));
    }
    let classes = labels.first().map(MultiHotLabel::len).unwrap_or(0);
    let mut loss = vec![0.0; classes];
    for (p, y) in preds.items.iter().zip(labels) {
        if p.probs.len() != classes || y.len() != classes {
            return Err(Error::Shape("class counts differ across samples".into()));
        }
        for (k, acc) in loss.iter_mut().enumerate() {
            *acc += soft_bce(p.probs[k], y.get(k) as u8 as f64);
        }
    }
    Ok(loss)
}

/// Live-cell sub-maps of a mixed image's feature map, row-major.
pub fn split_features(features: &ImageTensor, grid: &GridSpec) -> Result<Vec<ImageTensor>> {
    let geom = grid.geom;
    if features.height() % geom.rows != 0 || features.width() % geom.cols != 0 {
        return Err(Error::Grid(format!(
            "feature map {}x{} is not divisible by a {geom} grid",
            features.height(),
            features.width()
        )));
    }
    grid.live().map(|k| extract_cell(features, geom, k)).collect()
}

/// Inverse of [`split_features`]; dropped cells come back as zeros.
pub fn recover_features(parts: &[ImageTensor], grid: &GridSpec) -> Result<ImageTensor> {
    if parts.len() != grid.live_cells() {
        return Err(Error::Grid(format!(
            "{} sub-maps for {} live cells",
            parts.len(),
            grid.live_cells()
        )));
    }
    let mut cells: Vec<Option<&ImageTensor>> = vec![None; grid.geom.cells()];
    for (k, part) in grid.live().zip(parts) {
        cells[k] = Some(part);
    }
    grid_compose(&cells, grid.geom, 0.0)
}

/// Consistency loss between sub-image predictions and detached regular predictions.
///
/// `sub_preds` follows plan order: mixed image by mixed image, live cells
/// row-major. Entry `j` of a mixed image is paired with the regular prediction
/// of the member placed in that cell.
pub fn cl_loss(
    regular_preds: &PredictionSet,
    sub_preds: &PredictionSet,
    plan: &BatchPlan,
) -> Result<Vec<f64>> {
    if !regular_preds.stop_grad {
        return Err(Error::Shape(
            "consistency targets must be a detached prediction set".into(),
        ));
    }
    let pairs: Vec<usize> = plan.mixed.iter().flat_map(|m| m.members.iter().copied()).collect();
    if pairs.len() != sub_preds.len() {
        return Err(Error::Shape(format!(
            "{} sub-image predictions for {} plan members",
            sub_preds.len(),
            pairs.len()
        )));
    }
    let classes = regular_preds
        .items
        .first()
        .map(|p| p.probs.len())
        .unwrap_or(0);
    let mut loss = vec![0.0; classes];
    for (sub, &j) in sub_preds.items.iter().zip(&pairs) {
        let target = regular_preds
            .items
            .get(j)
            .ok_or_else(|| Error::Shape(format!("member {j} has no regular prediction")))?;
        if sub.probs.len() != classes || target.probs.len() != classes {
            return Err(Error::Shape("class counts differ across predictions".into()));
        }
        for (k, acc) in loss.iter_mut().enumerate() {
            *acc += soft_bce(sub.probs[k], target.probs[k]);
        }
    }
    Ok(loss)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub bce: Vec<f64>,
    pub cl: Vec<f64>,
    pub total: f64,
}

pub fn total_loss(bce: Vec<f64>, cl: Vec<f64>) -> Result<LossBreakdown> {
    if bce.len() != cl.len() {
        return Err(Error::Shape(format!(
            "bce has {} classes, cl has {}",
            bce.len(),
            cl.len()
        )));
    }
    let total = bce.iter().sum::<f64>() + cl.iter().sum::<f64>();
    Ok(LossBreakdown { bce, cl, total })
}

/// Which terms the objective includes.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Objective {
    /// BCE over the spliced batch.
    SpliceMix,
    /// BCE plus sub-image consistency.
    SpliceMixCl,
}

/// Feature maps for one spliced batch.
#[derive(Clone, Copy, Debug)]
pub struct FeatureBatch<'a> {
    pub regular: &'a [ImageTensor],
    pub regular_labels: &'a [MultiHotLabel],
    pub mixed: &'a [ImageTensor],
    pub mixed_labels: &'a [MultiHotLabel],
    pub plan: &'a BatchPlan,
}

/// Pooled features of a spliced batch, including the split sub-image features.
#[derive(Clone, Debug, PartialEq)]
pub struct PooledBatch {
    pub regular: Vec<Vec<f64>>,
    pub regular_labels: Vec<MultiHotLabel>,
    pub mixed: Vec<Vec<f64>>,
    pub mixed_labels: Vec<MultiHotLabel>,
    /// Pooled sub-maps in plan order.
    pub sub: Vec<Vec<f64>>,
    /// Regular index paired with each entry of `sub`.
    pub sub_members: Vec<usize>,
}

impl PooledBatch {
    pub fn from_features(batch: &FeatureBatch<'_>) -> Result<Self> {
        if batch.mixed.len() != batch.plan.n_mixed() {
            return Err(Error::Shape(format!(
                "{} mixed feature maps for {} planned images",
                batch.mixed.len(),
                batch.plan.n_mixed()
            )));
        }
        let mut sub = Vec::new();
        let mut sub_members = Vec::new();
        for (f, m) in batch.mixed.iter().zip(&batch.plan.mixed) {
            for part in split_features(f, &m.grid)? {
                sub.push(global_max_pool(&part));
            }
            sub_members.extend(&m.members);
        }
        Self::new(
            batch.regular.iter().map(global_max_pool).collect(),
            batch.regular_labels.to_vec(),
            batch.mixed.iter().map(global_max_pool).collect(),
            batch.mixed_labels.to_vec(),
            sub,
            sub_members,
        )
    }

    pub fn new(
        regular: Vec<Vec<f64>>,
        regular_labels: Vec<MultiHotLabel>,
        mixed: Vec<Vec<f64>>,
        mixed_labels: Vec<MultiHotLabel>,
        sub: Vec<Vec<f64>>,
        sub_members: Vec<usize>,
    ) -> Result<Self> {
        if regular.len() != regular_labels.len() || mixed.len() != mixed_labels.len() {
            return Err(Error::Shape("feature and label counts differ".into()));
        }
        if sub.len() != sub_members.len() || sub_members.iter().any(|&j| j >= regular.len()) {
            return Err(Error::Shape("sub-image pairing does not match the batch".into()));
        }
        Ok(Self {
            regular,
            regular_labels,
            mixed,
            mixed_labels,
            sub,
            sub_members,
        })
    }
}

/// Gradient with respect to the head parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct HeadGrad {
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

impl HeadGrad {
    pub fn zeros(classes: usize, dim: usize) -> Self {
        Self {
            weights: vec![0.0; classes * dim],
            bias: vec![0.0; classes],
        }
    }

    fn accumulate(&mut self, dz: &[f64], x: &[f64]) {
        let dim = x.len();
        for (k, &d) in dz.iter().enumerate() {
            if d == 0.0 {
                continue;
            }
            self.bias[k] += d;
            for (w, &xi) in self.weights[k * dim..(k + 1) * dim].iter_mut().zip(x) {
                *w += d * xi;
            }
        }
    }

    pub fn norm(&self) -> f64 {
        self.weights
            .iter()
            .chain(&self.bias)
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt()
    }
}

/// Loss breakdown and analytic gradient of the objective.
///
/// `∂L/∂z` is `p − y` for every BCE term and `p′ − p̄` for every consistency
/// term, where `p̄` is held constant. Gradients are taken of the unclamped
/// sigmoid, so they are exact wherever `p ∈ [ε, 1 − ε]`.
pub fn grad_total_loss(
    head: &LinearHead,
    batch: &PooledBatch,
    objective: Objective,
) -> Result<(LossBreakdown, HeadGrad)> {
    let classes = head.classes();
    let mut grad = HeadGrad::zeros(classes, head.dim());
    let mut bce = vec![0.0; classes];

    let mut regular_probs = Vec::with_capacity(batch.regular.len());
    let samples = batch
        .regular
        .iter()
        .zip(&batch.regular_labels)
        .map(|(x, y)| (x, y, true))
        .chain(batch.mixed.iter().zip(&batch.mixed_labels).map(|(x, y)| (x, y, false)));
    for (x, y, is_regular) in samples {
        if y.len() != classes {
            return Err(Error::Shape(format!(
                "label has {} classes, head has {classes}",
                y.len()
            )));
        }
        let pred = predict_pooled(head, x)?;
        let dz: Vec<f64> = (0..classes)
            .map(|k| {
                let t = y.get(k) as u8 as f64;
                bce[k] += soft_bce(pred.probs[k], t);
                pred.probs[k] - t
            })
            .collect();
        grad.accumulate(&dz, x);
        if is_regular {
            regular_probs.push(pred.probs);
        }
    }

    let mut cl = vec![0.0; classes];
    if objective == Objective::SpliceMixCl {
        for (x, &j) in batch.sub.iter().zip(&batch.sub_members) {
            let target = &regular_probs[j];
            let pred = predict_pooled(head, x)?;
            let dz: Vec<f64> = (0..classes)
                .map(|k| {
                    cl[k] += soft_bce(pred.probs[k], target[k]);
                    pred.probs[k] - target[k]
                })
                .collect();
            grad.accumulate(&dz, x);
        }
    }

    Ok((total_loss(bce, cl)?, grad))
}

/// One momentum-SGD update with coupled weight decay.
///
/// `d = g + wd·θ`, `v ← μ·v + d` (first step `v = d`), `θ ← θ − lr·v`.
pub fn sgd_step(
    head: &LinearHead,
    grads: &HeadGrad,
    velocity: &mut Option<HeadGrad>,
    lr: f64,
    momentum: f64,
    weight_decay: f64,
) -> Result<LinearHead> {
    if !(lr > 0.0) {
        return Err(Error::Config(format!("learning rate {lr} must be positive")));
    }
    if grads.weights.len() != head.weights.len() || grads.bias.len() != head.bias.len() {
        return Err(Error::Shape("gradient does not match head".into()));
    }
    let d = HeadGrad {
        weights: head
            .weights
            .iter()
            .zip(&grads.weights)
            .map(|(w, g)| g + weight_decay * w)
            .collect(),
        bias: head
            .bias
            .iter()
            .zip(&grads.bias)
            .map(|(b, g)| g + weight_decay * b)
            .collect(),
    };
    let v = match velocity.take() {
        Some(mut v) if momentum != 0.0 => {
            for (vi, di) in v.weights.iter_mut().zip(&d.weights) {
                *vi = momentum * *vi + di;
            }
            for (vi, di) in v.bias.iter_mut().zip(&d.bias) {
                *vi = momentum * *vi + di;
            }
            v
        }
        _ => d,
    };
    let next = LinearHead {
        classes: head.classes,
        dim: head.dim,
        weights: head
            .weights
            .iter()
            .zip(&v.weights)
            .map(|(w, vi)| w - lr * vi)
            .collect(),
        bias: head.bias.iter().zip(&v.bias).map(|(b, vi)| b - lr * vi).collect(),
    };
    *velocity = Some(v);
    Ok(next)
}

/// Stateful wrapper around [`sgd_step`].
#[derive(Clone, Debug)]
pub struct Sgd {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    velocity: Option<HeadGrad>,
}

impl Sgd {
    pub fn new(lr: f64, momentum: f64, weight_decay: f64) -> Self {
        Self {
            lr,
            momentum,
            weight_decay,
            velocity: None,
        }
    }

    pub fn step(&mut self, head: &LinearHead, grads: &HeadGrad) -> Result<LinearHead> {
        sgd_step(
            head,
            grads,
            &mut self.velocity,
            self.lr,
            self.momentum,
            self.weight_decay,
        )
    }
}
