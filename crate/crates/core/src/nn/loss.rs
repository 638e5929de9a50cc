//! Loss functions with per-sample values and hand-derived output gradients.
//!
//! The weighted batch loss is `(1/n) * sum_i w_i * loss_i`: all-ones weights
//! reproduce the unweighted mean exactly, and a zero weight removes a
//! sample's gradient contribution entirely.

use super::{Gradients, Network};
use crate::error::{Error, Result};
use crate::scalar::Real;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum LossSpec {
    /// Mean squared error over all output elements.
    MeanSquaredError,
    /// Softmax cross-entropy over logits; target is a one-element tensor
    /// holding the class index.
    CrossEntropy,
    /// Equally weighted pixelwise binary cross-entropy and soft Dice loss on
    /// mask probabilities; `smooth` guards the Dice ratio on empty masks.
    CePlusDice { smooth: f64 },
}

impl LossSpec {
    pub fn ce_plus_dice() -> Self {
        LossSpec::CePlusDice { smooth: 1.0 }
    }
}

#[derive(Debug)]
pub struct BatchLoss<F: Real> {
    pub loss: F,
    pub per_sample: Vec<F>,
    pub grads: Gradients<F>,
}

/// Loss and output gradient for a single sample.
pub fn sample_loss_grad<F: Real>(
    spec: &LossSpec,
    output: &Tensor<F>,
    target: &Tensor<F>,
) -> (F, Tensor<F>) {
    match spec {
        LossSpec::MeanSquaredError => {
            let n = F::real(output.len() as f64);
            let mut loss = F::zero();
            let mut grad = Tensor::zeros(output.shape());
            let two = F::real(2.0);
            for ((&o, &t), g) in output
                .iter()
                .zip(target.iter())
                .zip(grad.data_mut().iter_mut())
            {
                let d = o - t;
                loss += d * d;
                *g = two * d / n;
            }
            (loss / n, grad)
        }
        LossSpec::CrossEntropy => {
            let class = target.data()[0].as_f64() as usize;
            let logits = output.data();
            let m = logits.iter().copied().fold(F::neg_infinity(), F::max);
            let mut sum = F::zero();
            for &z in logits {
                sum += (z - m).exp();
            }
            let log_sum = sum.ln();
            let loss = -(logits[class] - m - log_sum);
            let mut grad = Tensor::zeros(output.shape());
            for (g, &z) in grad.data_mut().iter_mut().zip(logits) {
                *g = (z - m).exp() / sum;
            }
            grad.data_mut()[class] -= F::one();
            (loss, grad)
        }
        LossSpec::CePlusDice { smooth } => {
            let eps = F::real(1e-7);
            let one = F::one();
            let half = F::real(0.5);
            let n = F::real(output.len() as f64);
            let sm = F::real(*smooth);
            let p = output.data();
            let t = target.data();
            // soft Dice terms
            let mut sum_pt = F::zero();
            let mut sum_p = F::zero();
            let mut sum_t = F::zero();
            for (&pv, &tv) in p.iter().zip(t) {
                sum_pt += pv * tv;
                sum_p += pv;
                sum_t += tv;
            }
            let num = F::real(2.0) * sum_pt + sm;
            let den = sum_p + sum_t + sm;
            let dice = num / den;
            // pixelwise binary cross-entropy on clamped probabilities
            let mut bce = F::zero();
            let mut grad = Tensor::zeros(output.shape());
            let lo = eps;
            let hi = one - eps;
            for ((&pv, &tv), g) in p.iter().zip(t).zip(grad.data_mut().iter_mut()) {
                let pc = pv.max(lo).min(hi);
                bce += -(tv * pc.ln() + (one - tv) * (one - pc).ln());
                // clamp saturates: no CE gradient outside (lo, hi)
                let d_bce = if pv > lo && pv < hi {
                    (-tv / pc + (one - tv) / (one - pc)) / n
                } else {
                    F::zero()
                };
                let d_dice_loss = -(F::real(2.0) * tv * den - num) / (den * den);
                *g = half * d_bce + half * d_dice_loss;
            }
            bce = bce / n;
            (half * bce + half * (one - dice), grad)
        }
    }
}

/// Loss for a single sample without gradients.
pub fn sample_loss<F: Real>(spec: &LossSpec, output: &Tensor<F>, target: &Tensor<F>) -> F {
    sample_loss_grad(spec, output, target).0
}

fn validate_targets<F: Real>(
    spec: &LossSpec,
    net: &Network<F>,
    targets: &[Tensor<F>],
) -> Result<()> {
    let out_shape = net.output_shape();
    for (i, t) in targets.iter().enumerate() {
        match spec {
            LossSpec::CrossEntropy => {
                if t.len() != 1 {
                    return Err(Error::Shape(format!(
                        "sample {i}: cross-entropy target must be a single class index"
                    )));
                }
                let class = t.data()[0].as_f64();
                if class < 0.0 || class as usize >= out_shape.iter().product() {
                    return Err(Error::Shape(format!(
                        "sample {i}: class index {class} out of range"
                    )));
                }
            }
            _ => {
                if t.shape() != out_shape {
                    return Err(Error::Shape(format!(
                        "sample {i}: target shape {:?} does not match output {:?}",
                        t.shape(),
                        out_shape
                    )));
                }
            }
        }
    }
    Ok(())
}

/// Weighted mean loss over a batch and its parameter gradients.
pub fn loss_and_grad<F: Real>(
    net: &Network<F>,
    inputs: &[Tensor<F>],
    targets: &[Tensor<F>],
    spec: &LossSpec,
    weights: Option<&[F]>,
) -> Result<BatchLoss<F>> {
    if inputs.is_empty() {
        return Err(Error::EmptyInput);
    }
    if inputs.len() != targets.len() {
        return Err(Error::Shape(format!(
            "{} inputs but {} targets",
            inputs.len(),
            targets.len()
        )));
    }
    if let Some(w) = weights {
        if w.len() != inputs.len() {
            return Err(Error::Shape(format!(
                "{} inputs but {} weights",
                inputs.len(),
                w.len()
            )));
        }
    }
    validate_targets(spec, net, targets)?;
    let n = F::real(inputs.len() as f64);
    let (per_sample, grads) = net.batch_backward(inputs, |i, out| {
        let (loss, mut dout) = sample_loss_grad(spec, out, &targets[i]);
        let w = weights.map_or(F::one(), |w| w[i]);
        let scale = w / n;
        for v in dout.data_mut() {
            *v *= scale;
        }
        (loss, dout)
    })?;
    for (i, l) in per_sample.iter().enumerate() {
        if !l.is_finite() {
            return Err(Error::NonFiniteLoss {
                sample: i,
                value: l.as_f64(),
            });
        }
    }
    let mut total = F::zero();
    for (i, &l) in per_sample.iter().enumerate() {
        let w = weights.map_or(F::one(), |w| w[i]);
        total += w * l;
    }
    Ok(BatchLoss {
        loss: total / n,
        per_sample,
        grads,
    })
}

/// Weighted mean loss without gradients (used by finite differences).
pub fn loss_only<F: Real>(
    net: &Network<F>,
    inputs: &[Tensor<F>],
    targets: &[Tensor<F>],
    spec: &LossSpec,
    weights: Option<&[F]>,
) -> Result<F> {
    if inputs.is_empty() {
        return Err(Error::EmptyInput);
    }
    validate_targets(spec, net, targets)?;
    let outputs = net.forward_batch(inputs)?;
    let n = F::real(inputs.len() as f64);
    let mut total = F::zero();
    for (i, out) in outputs.iter().enumerate() {
        let w = weights.map_or(F::one(), |w| w[i]);
        total += w * sample_loss(spec, out, &targets[i]);
    }
    Ok(total / n)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::NetworkBuilder;
    use crate::rng::rng_for;

    #[test]
    fn mse_at_minimum_is_zero_with_zero_grads() {
        let net: Network = Network::identity(&[3]);
        let x = Tensor::from_vec(&[3], vec![0.2, 0.5, 0.9]).unwrap();
        let out = loss_and_grad(
            &net,
            &[x.clone()],
            &[x],
            &LossSpec::MeanSquaredError,
            None,
        )
        .unwrap();
        assert_eq!(out.loss, 0.0);
        assert_eq!(out.grads.max_abs(), 0.0);
    }

    #[test]
    fn cross_entropy_at_half_is_ln_two() {
        // logits (0, 0) give probability 0.5 for either class
        let net: Network = Network::identity(&[2]);
        let x = Tensor::from_vec(&[2], vec![0.0, 0.0]).unwrap();
        let t = Tensor::scalar(1.0);
        let out = loss_and_grad(&net, &[x], &[t], &LossSpec::CrossEntropy, None).unwrap();
        assert!((out.loss - std::f64::consts::LN_2).abs() < 1e-15);
    }

    #[test]
    fn all_ones_weights_equal_unweighted_exactly() {
        let mut rng = rng_for(11, "t");
        let net: Network = NetworkBuilder::new(&[4])
            .dense(3)
            .relu()
            .dense(2)
            .build(&mut rng)
            .unwrap();
        let xs: Vec<Tensor> = (0..5)
            .map(|i| Tensor::from_vec(&[4], (0..4).map(|j| ((i * 4 + j) as f64 * 0.3).sin()).collect()).unwrap())
            .collect();
        let ts: Vec<Tensor> = (0..5).map(|i| Tensor::scalar((i % 2) as f64)).collect();
        let a = loss_and_grad(&net, &xs, &ts, &LossSpec::CrossEntropy, None).unwrap();
        let ones = vec![1.0; 5];
        let b = loss_and_grad(&net, &xs, &ts, &LossSpec::CrossEntropy, Some(&ones)).unwrap();
        assert_eq!(a.loss, b.loss);
        assert_eq!(a.grads, b.grads);
    }

    #[test]
    fn zero_weight_sample_cannot_influence_gradients() {
        let mut rng = rng_for(12, "t");
        let net: Network = NetworkBuilder::new(&[3]).dense(2).build(&mut rng).unwrap();
        let mut xs: Vec<Tensor> = (0..3)
            .map(|i| Tensor::from_vec(&[3], vec![0.1 * i as f64, 0.2, 0.3]).unwrap())
            .collect();
        let ts: Vec<Tensor> = (0..3).map(|_| Tensor::scalar(0.0)).collect();
        let w = vec![1.0, 0.0, 1.0];
        let a = loss_and_grad(&net, &xs, &ts, &LossSpec::CrossEntropy, Some(&w)).unwrap();
        // perturb the zero-weighted sample's input arbitrarily
        xs[1] = Tensor::from_vec(&[3], vec![9.0, -7.0, 4.2]).unwrap();
        let b = loss_and_grad(&net, &xs, &ts, &LossSpec::CrossEntropy, Some(&w)).unwrap();
        assert_eq!(a.loss, b.loss);
        assert_eq!(a.grads, b.grads);
    }

    #[test]
    fn non_finite_loss_names_sample() {
        let net: Network = Network::identity(&[1]);
        let xs = vec![Tensor::scalar(1.0), Tensor::scalar(f64::INFINITY)];
        let ts = vec![Tensor::scalar(0.0), Tensor::scalar(0.0)];
        let err = loss_and_grad(&net, &xs, &ts, &LossSpec::MeanSquaredError, None).unwrap_err();
        match err {
            Error::NonFiniteLoss { sample, .. } => assert_eq!(sample, 1),
            other => panic!("unexpected error {other:?}"),
        }
    }
}
