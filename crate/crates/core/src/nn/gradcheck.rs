//! Central finite-difference verification of analytic gradients.

use super::loss::{loss_and_grad, loss_only, LossSpec};
use super::{Gradients, Network};
use crate::error::Result;
use crate::scalar::Real;
use crate::tensor::Tensor;

pub const DEFAULT_FD_STEP: f64 = 1e-5;

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub max_rel_dev: f64,
    pub tolerance: f64,
    pub flagged: bool,
    /// Parameter with the largest deviation, e.g. `layer2.weight[14]`.
    pub worst: String,
}

/// Central finite differences of the weighted batch loss w.r.t. every
/// parameter. Intended for small networks (<= 1e4 parameters).
pub fn fd_gradients<F: Real>(
    net: &Network<F>,
    inputs: &[Tensor<F>],
    targets: &[Tensor<F>],
    spec: &LossSpec,
    weights: Option<&[F]>,
    step: f64,
) -> Result<Gradients<F>> {
    let h = F::real(step);
    let two_h = F::real(2.0 * step);
    let mut numeric = Gradients::zeros_like(net);
    let mut work = net.clone();
    for li in 0..net.params().len() {
        for ti in 0..net.params()[li].len() {
            for idx in 0..net.params()[li][ti].len() {
                let orig = work.params()[li][ti].data()[idx];
                work.params_mut()[li][ti].data_mut()[idx] = orig + h;
                let plus = loss_only(&work, inputs, targets, spec, weights)?;
                work.params_mut()[li][ti].data_mut()[idx] = orig - h;
                let minus = loss_only(&work, inputs, targets, spec, weights)?;
                work.params_mut()[li][ti].data_mut()[idx] = orig;
                numeric.layers[li][ti].data_mut()[idx] = (plus - minus) / two_h;
            }
        }
    }
    Ok(numeric)
}

/// Relative deviation guarded at 1: `|a - n| / max(1, |a|, |n|)`.
fn rel_dev(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(1.0)
}

/// Largest relative deviation between two gradient sets, with the location
/// of the worst entry.
pub fn max_rel_deviation<F: Real>(
    net: &Network<F>,
    analytic: &Gradients<F>,
    numeric: &Gradients<F>,
) -> (f64, String) {
    let mut worst = 0.0;
    let mut worst_name = String::from("-");
    for (li, (a_ts, n_ts)) in analytic.layers.iter().zip(&numeric.layers).enumerate() {
        for (ti, (a_t, n_t)) in a_ts.iter().zip(n_ts).enumerate() {
            for (idx, (&av, &nv)) in a_t.data().iter().zip(n_t.data()).enumerate() {
                let d = rel_dev(av.as_f64(), nv.as_f64());
                if d > worst {
                    worst = d;
                    let suffix = if ti == 0 { "weight" } else { "bias" };
                    let _ = &net.layers()[li];
                    worst_name = format!("layer{li}.{suffix}[{idx}]");
                }
            }
        }
    }
    (worst, worst_name)
}

/// Compares analytic gradients against central finite differences and flags
/// deviations above `tolerance`.
pub fn gradient_check<F: Real>(
    net: &Network<F>,
    inputs: &[Tensor<F>],
    targets: &[Tensor<F>],
    spec: &LossSpec,
    weights: Option<&[F]>,
    tolerance: f64,
) -> Result<GradCheckReport> {
    debug_assert!(net.param_count() <= 10_000, "gradient_check is for small nets");
    let analytic = loss_and_grad(net, inputs, targets, spec, weights)?.grads;
    compare_to_fd(net, inputs, targets, spec, weights, &analytic, tolerance)
}

/// Same as [`gradient_check`] but with externally supplied analytic
/// gradients, so deliberately corrupted gradients can be exercised.
pub fn compare_to_fd<F: Real>(
    net: &Network<F>,
    inputs: &[Tensor<F>],
    targets: &[Tensor<F>],
    spec: &LossSpec,
    weights: Option<&[F]>,
    analytic: &Gradients<F>,
    tolerance: f64,
) -> Result<GradCheckReport> {
    let numeric = fd_gradients(net, inputs, targets, spec, weights, DEFAULT_FD_STEP)?;
    let (max_rel_dev, worst) = max_rel_deviation(net, analytic, &numeric);
    Ok(GradCheckReport {
        max_rel_dev,
        tolerance,
        flagged: max_rel_dev > tolerance,
        worst,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::NetworkBuilder;
    use crate::rng::rng_for;
    use rand::Rng;

    fn random_inputs(rng: &mut crate::rng::RunRng, shape: &[usize], n: usize) -> Vec<Tensor> {
        (0..n)
            .map(|_| {
                let len: usize = shape.iter().product();
                Tensor::from_vec(
                    shape,
                    (0..len).map(|_| rng.random::<f64>() * 2.0 - 1.0).collect(),
                )
                .unwrap()
            })
            .collect()
    }

    #[test]
    fn linear_regression_gradients_are_nearly_exact() {
        let mut rng = rng_for(21, "gc");
        let net: Network = NetworkBuilder::new(&[4]).dense(1).build(&mut rng).unwrap();
        let xs = random_inputs(&mut rng, &[4], 6);
        let ts: Vec<Tensor> = (0..6)
            .map(|_| Tensor::scalar(rng.random::<f64>()))
            .collect();
        let rep = gradient_check(&net, &xs, &ts, &LossSpec::MeanSquaredError, None, 1e-6).unwrap();
        assert!(!rep.flagged, "deviation {} at {}", rep.max_rel_dev, rep.worst);
        assert!(rep.max_rel_dev < 1e-6);
    }

    #[test]
    fn relu_net_passes_away_from_kinks() {
        let mut rng = rng_for(22, "gc");
        let net: Network = NetworkBuilder::new(&[5])
            .dense(8)
            .relu()
            .dense(3)
            .build(&mut rng)
            .unwrap();
        let xs = random_inputs(&mut rng, &[5], 4);
        let ts: Vec<Tensor> = (0..4).map(|i| Tensor::scalar((i % 3) as f64)).collect();
        let rep = gradient_check(&net, &xs, &ts, &LossSpec::CrossEntropy, None, 1e-4).unwrap();
        assert!(!rep.flagged, "deviation {} at {}", rep.max_rel_dev, rep.worst);
    }

    #[test]
    fn corrupted_gradient_is_flagged() {
        let mut rng = rng_for(23, "gc");
        let net: Network = NetworkBuilder::new(&[3]).dense(2).build(&mut rng).unwrap();
        let xs = random_inputs(&mut rng, &[3], 3);
        let ts: Vec<Tensor> = (0..3).map(|_| Tensor::scalar(0.0)).collect();
        let mut grads = loss_and_grad(&net, &xs, &ts, &LossSpec::CrossEntropy, None)
            .unwrap()
            .grads;
        grads.layers[0][0].data_mut()[1] += 1.0;
        let rep = compare_to_fd(&net, &xs, &ts, &LossSpec::CrossEntropy, None, &grads, 1e-4)
            .unwrap();
        assert!(rep.flagged);
        assert_eq!(rep.worst, "layer0.weight[1]");
    }
}
