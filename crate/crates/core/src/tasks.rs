//! Target tasks: classification, segmentation, and self-reconstruction.
//!
//! Each task pairs a small predictor architecture with a training loss and a
//! per-sample validation metric. The reconstruction task feeds the image
//! back as its own target, so its labels are bitwise-identical to the
//! inputs.

use crate::error::{Error, Result};
use crate::nn::{loss_and_grad, LossSpec, Network, NetworkBuilder, OptimizerState};
use crate::rng::RunRng;
use crate::tensor::Tensor;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    Classification,
    Segmentation,
    Reconstruction,
}

/// Task descriptor: architecture width, training loss and metric conventions.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskSpec {
    pub kind: TaskKind,
    /// Channel width of the first conv level; deeper levels scale from it.
    pub base_channels: usize,
    /// Probability threshold converting mask probabilities to binary masks.
    pub seg_threshold: f64,
    pub loss: LossSpec,
}

impl TaskSpec {
    pub fn classification(base_channels: usize) -> Self {
        TaskSpec {
            kind: TaskKind::Classification,
            base_channels,
            seg_threshold: 0.5,
            loss: LossSpec::CrossEntropy,
        }
    }

    pub fn segmentation(base_channels: usize, seg_threshold: f64) -> Self {
        TaskSpec {
            kind: TaskKind::Segmentation,
            base_channels,
            seg_threshold,
            loss: LossSpec::ce_plus_dice(),
        }
    }

    pub fn reconstruction(base_channels: usize) -> Self {
        TaskSpec {
            kind: TaskKind::Reconstruction,
            base_channels,
            seg_threshold: 0.5,
            loss: LossSpec::MeanSquaredError,
        }
    }

    pub fn reward_metric_name(&self) -> &'static str {
        match self.kind {
            TaskKind::Classification => "accuracy",
            TaskKind::Segmentation => "dice",
            TaskKind::Reconstruction => "neg_mae",
        }
    }

    /// Converts a mean per-sample metric value into the reported reward
    /// metric (accuracy, mean Dice, or negated MAE).
    pub fn metric_from_mean_loss(&self, mean_loss: f64) -> f64 {
        match self.kind {
            TaskKind::Classification | TaskKind::Segmentation => 1.0 - mean_loss,
            TaskKind::Reconstruction => -mean_loss,
        }
    }

    /// Builds the task predictor for `input_shape = [c, h, w]`.
    pub fn build_predictor(&self, input_shape: &[usize], rng: &mut RunRng) -> Result<PredictorModel> {
        if input_shape.len() != 3 {
            return Err(Error::Shape(format!(
                "predictor input must be [c, h, w], got {input_shape:?}"
            )));
        }
        let b = self.base_channels;
        let c = input_shape[0];
        let net = match self.kind {
            // two conv blocks and a dense head
            TaskKind::Classification => NetworkBuilder::new(input_shape)
                .conv2d(b, 3)
                .relu()
                .max_pool2()
                .conv2d(2 * b, 3)
                .relu()
                .max_pool2()
                .flatten()
                .dense(2)
                .build(rng)?,
            // two-level encoder-decoder with one skip connection
            TaskKind::Segmentation => NetworkBuilder::new(input_shape)
                .conv2d(b, 3)
                .relu()
                .skip_save()
                .max_pool2()
                .conv2d(2 * b, 3)
                .relu()
                .conv2d(b, 3)
                .relu()
                .upsample2()
                .skip_concat()
                .conv2d(1, 1)
                .sigmoid()
                .build(rng)?,
            // two-level convolutional autoencoder with a quarter-resolution bottleneck
            TaskKind::Reconstruction => NetworkBuilder::new(input_shape)
                .conv2d(b, 3)
                .relu()
                .max_pool2()
                .conv2d(b, 3)
                .relu()
                .max_pool2()
                .conv2d(b, 3)
                .relu()
                .upsample2()
                .conv2d(b, 3)
                .relu()
                .upsample2()
                .conv2d(c, 1)
                .sigmoid()
                .build(rng)?,
        };
        Ok(PredictorModel { net })
    }
}

/// The target-task network f(.; w).
#[derive(Debug, Clone, PartialEq)]
pub struct PredictorModel {
    pub net: Network,
}

/// Per-sample task target.
#[derive(Debug, Clone, Copy)]
pub enum Target<'a> {
    Class(usize),
    Mask(&'a Tensor),
    Image(&'a Tensor),
}

impl Target<'_> {
    fn to_loss_tensor(self) -> Tensor {
        match self {
            Target::Class(c) => Tensor::scalar(c as f64),
            Target::Mask(m) => m.clone(),
            Target::Image(x) => x.clone(),
        }
    }
}

/// Predictions plus per-sample metric values l_j >= 0.
#[derive(Debug, Clone)]
pub struct PredictionBatch {
    pub outputs: Vec<Tensor>,
    pub metrics: Vec<f64>,
}

impl PredictionBatch {
    pub fn mean_metric(&self) -> f64 {
        self.metrics.iter().sum::<f64>() / self.metrics.len() as f64
    }
}

fn softmax(logits: &Tensor) -> Tensor {
    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&z| (z - m).exp()).collect();
    let s: f64 = exps.iter().sum();
    Tensor::from_vec(logits.shape(), exps.into_iter().map(|e| e / s).collect())
        .expect("softmax preserves shape")
}

fn argmax(t: &Tensor) -> usize {
    let mut best = 0;
    let mut bv = f64::NEG_INFINITY;
    for (i, &v) in t.iter().enumerate() {
        if v > bv {
            bv = v;
            best = i;
        }
    }
    best
}

pub fn mean_abs_error(a: &Tensor, b: &Tensor) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(Error::Shape(format!(
            "shape mismatch {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let s: f64 = a.iter().zip(b.iter()).map(|(&x, &y)| (x - y).abs()).sum();
    Ok(s / a.len() as f64)
}

/// Binary Dice overlap `2|A n B| / (|A| + |B|)`; two empty masks score 1.
pub fn dice(a: &Tensor, b: &Tensor) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(Error::Shape(format!(
            "shape mismatch {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let mut inter = 0usize;
    let mut na = 0usize;
    let mut nb = 0usize;
    for (&x, &y) in a.iter().zip(b.iter()) {
        let xa = x > 0.5;
        let xb = y > 0.5;
        na += xa as usize;
        nb += xb as usize;
        inter += (xa && xb) as usize;
    }
    if na + nb == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * inter as f64 / (na + nb) as f64)
}

/// Fraction of matching entries; errors on empty or mismatched input.
pub fn accuracy(preds: &[usize], targets: &[usize]) -> Result<f64> {
    if preds.is_empty() {
        return Err(Error::EmptyInput);
    }
    if preds.len() != targets.len() {
        return Err(Error::Shape(format!(
            "{} predictions but {} targets",
            preds.len(),
            targets.len()
        )));
    }
    let hits = preds
        .iter()
        .zip(targets)
        .filter(|(p, t)| p == t)
        .count();
    Ok(hits as f64 / preds.len() as f64)
}

fn sample_metric(task: &TaskSpec, output: &Tensor, input: &Tensor, target: &Target) -> Result<f64> {
    match (task.kind, target) {
        (TaskKind::Classification, Target::Class(c)) => {
            Ok(if argmax(output) == *c { 0.0 } else { 1.0 })
        }
        (TaskKind::Segmentation, Target::Mask(mask)) => {
            let thr = task.seg_threshold;
            let bin = output.map(|v| if v > thr { 1.0 } else { 0.0 });
            Ok(1.0 - dice(&bin, mask)?)
        }
        (TaskKind::Reconstruction, _) => mean_abs_error(output, input),
        _ => Err(Error::Shape(format!(
            "target kind does not match task {:?}",
            task.kind
        ))),
    }
}

/// Runs the predictor and computes per-sample metric values. Read-only and
/// parallel over samples.
pub fn predict(
    task: &TaskSpec,
    model: &PredictorModel,
    inputs: &[&Tensor],
    targets: &[Target],
) -> Result<PredictionBatch> {
    if inputs.len() != targets.len() {
        return Err(Error::Shape(format!(
            "{} inputs but {} targets",
            inputs.len(),
            targets.len()
        )));
    }
    let pairs: Vec<(Tensor, f64)> = inputs
        .par_iter()
        .zip(targets.par_iter())
        .map(|(x, t)| {
            let raw = model.net.forward(x)?;
            let out = match task.kind {
                TaskKind::Classification => softmax(&raw),
                _ => raw,
            };
            let l = sample_metric(task, &out, x, t)?;
            Ok((out, l))
        })
        .collect::<Result<Vec<_>>>()?;
    let (outputs, metrics) = pairs.into_iter().unzip();
    Ok(PredictionBatch { outputs, metrics })
}

/// Per-sample metric values only (no prediction tensors kept).
pub fn metric_values(
    task: &TaskSpec,
    model: &PredictorModel,
    inputs: &[&Tensor],
    targets: &[Target],
) -> Result<Vec<f64>> {
    Ok(predict(task, model, inputs, targets)?.metrics)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum TrainStepOutcome {
    /// One optimizer step taken; carries the weighted batch loss.
    Stepped { loss: f64 },
    /// Selection was empty (or carried zero total weight); no update.
    Skipped,
}

/// One optimizer step on the task loss over the given samples. Per-sample
/// weights are normalized by their mean so that uniformly scaling all
/// weights leaves the update unchanged.
pub fn train_step(
    task: &TaskSpec,
    model: &mut PredictorModel,
    inputs: &[&Tensor],
    targets: &[Target],
    weights: Option<&[f64]>,
    opt: &mut OptimizerState,
) -> Result<TrainStepOutcome> {
    if inputs.is_empty() {
        return Ok(TrainStepOutcome::Skipped);
    }
    let normalized = match weights {
        None => None,
        Some(w) => {
            let mean = w.iter().sum::<f64>() / w.len() as f64;
            if mean <= 0.0 {
                return Ok(TrainStepOutcome::Skipped);
            }
            Some(w.iter().map(|v| v / mean).collect::<Vec<f64>>())
        }
    };
    let owned_inputs: Vec<Tensor> = inputs.iter().map(|x| (*x).clone()).collect();
    let loss_targets: Vec<Tensor> = match task.kind {
        TaskKind::Reconstruction => owned_inputs.clone(),
        _ => targets.iter().map(|t| t.to_loss_tensor()).collect(),
    };
    let batch = loss_and_grad(
        &model.net,
        &owned_inputs,
        &loss_targets,
        &task.loss,
        normalized.as_deref(),
    )?;
    opt.apply(&mut model.net, &batch.grads);
    Ok(TrainStepOutcome::Stepped { loss: batch.loss })
}
