//! Parameter update rules: plain SGD and the adaptive-moment rule.

use super::{Gradients, Network};
use crate::scalar::Real;
use crate::tensor::Tensor;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum OptimizerKind {
    Sgd,
    Adam { beta1: f64, beta2: f64, eps: f64 },
}

impl OptimizerKind {
    pub fn adam() -> Self {
        OptimizerKind::Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Optimizer state; moment accumulators mirror the parameter shapes and are
/// allocated on the first step.
#[derive(Debug, Clone)]
pub struct OptimizerState<F: Real = f64> {
    kind: OptimizerKind,
    lr: f64,
    step: u64,
    m: Vec<Vec<Tensor<F>>>,
    v: Vec<Vec<Tensor<F>>>,
}

impl<F: Real> OptimizerState<F> {
    pub fn new(kind: OptimizerKind, lr: f64) -> Self {
        OptimizerState {
            kind,
            lr,
            step: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn sgd(lr: f64) -> Self {
        Self::new(OptimizerKind::Sgd, lr)
    }

    pub fn adam(lr: f64) -> Self {
        Self::new(OptimizerKind::adam(), lr)
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn learning_rate(&self) -> f64 {
        self.lr
    }

    fn ensure_moments(&mut self, net: &Network<F>) {
        if self.m.is_empty() {
            let zeros = || -> Vec<Vec<Tensor<F>>> {
                net.params()
                    .iter()
                    .map(|ts| ts.iter().map(|t| Tensor::zeros(t.shape())).collect())
                    .collect()
            };
            self.m = zeros();
            self.v = zeros();
        }
    }

    /// One update step. Gradient shapes must mirror the parameters.
    pub fn apply(&mut self, net: &mut Network<F>, grads: &Gradients<F>) {
        self.step += 1;
        let lr = F::real(self.lr);
        match self.kind {
            OptimizerKind::Sgd => {
                for (ts, gs) in net.params_mut().iter_mut().zip(&grads.layers) {
                    for (t, g) in ts.iter_mut().zip(gs) {
                        for (p, &gv) in t.data_mut().iter_mut().zip(g.data()) {
                            *p -= lr * gv;
                        }
                    }
                }
            }
            OptimizerKind::Adam { beta1, beta2, eps } => {
                self.ensure_moments(net);
                let b1 = F::real(beta1);
                let b2 = F::real(beta2);
                let e = F::real(eps);
                let one = F::one();
                let c1 = one - F::real(beta1.powi(self.step as i32));
                let c2 = one - F::real(beta2.powi(self.step as i32));
                for ((ts, gs), (ms, vs)) in net
                    .params_mut()
                    .iter_mut()
                    .zip(&grads.layers)
                    .zip(self.m.iter_mut().zip(self.v.iter_mut()))
                {
                    for ((t, g), (mt, vt)) in ts.iter_mut().zip(gs).zip(ms.iter_mut().zip(vs.iter_mut())) {
                        for ((p, &gv), (mv, vv)) in t
                            .data_mut()
                            .iter_mut()
                            .zip(g.data())
                            .zip(mt.data_mut().iter_mut().zip(vt.data_mut().iter_mut()))
                        {
                            *mv = b1 * *mv + (one - b1) * gv;
                            *vv = b2 * *vv + (one - b2) * gv * gv;
                            let mhat = *mv / c1;
                            let vhat = *vv / c2;
                            *p -= lr * mhat / (vhat.sqrt() + e);
                        }
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::NetworkBuilder;
    use crate::rng::rng_for;

    fn scalar_net(w: f64, b: f64) -> Network {
        let mut rng = rng_for(0, "t");
        let mut net: Network = NetworkBuilder::new(&[1]).dense(1).build(&mut rng).unwrap();
        net.params_mut()[0][0].data_mut()[0] = w;
        net.params_mut()[0][1].data_mut()[0] = b;
        net
    }

    fn unit_grads(net: &Network, weight_grad: f64) -> Gradients {
        let mut g = Gradients::zeros_like(net);
        g.layers[0][0].data_mut()[0] = weight_grad;
        g
    }

    #[test]
    fn sgd_direct_substitution() {
        let mut net = scalar_net(0.0, 0.0);
        let mut opt = OptimizerState::sgd(0.1);
        let g = unit_grads(&net, 1.0);
        opt.apply(&mut net, &g);
        assert!((net.params()[0][0].data()[0] - (-0.1)).abs() < 1e-15);
        assert_eq!(opt.step_count(), 1);
    }

    #[test]
    fn zero_gradient_is_fixed_point() {
        let mut net = scalar_net(0.7, -0.2);
        let before = net.clone();
        let zeros = Gradients::zeros_like(&net);
        let mut sgd = OptimizerState::sgd(0.5);
        sgd.apply(&mut net, &zeros);
        assert_eq!(net, before);
        let mut adam = OptimizerState::adam(0.5);
        adam.apply(&mut net, &zeros);
        assert_eq!(net, before);
    }

    #[test]
    fn two_sgd_steps_are_linear() {
        let mut net = scalar_net(0.0, 0.0);
        let mut opt = OptimizerState::sgd(0.1);
        let g = unit_grads(&net, 1.0);
        opt.apply(&mut net, &g);
        opt.apply(&mut net, &g);
        assert!((net.params()[0][0].data()[0] - (-0.2)).abs() < 1e-15);
        assert_eq!(opt.step_count(), 2);
    }

    #[test]
    fn adam_moments_mirror_params() {
        let mut net = scalar_net(0.0, 0.0);
        let mut opt = OptimizerState::adam(0.01);
        let g = unit_grads(&net, 0.5);
        opt.apply(&mut net, &g);
        assert_eq!(opt.m[0][0].shape(), net.params()[0][0].shape());
        assert_eq!(opt.v[0][1].shape(), net.params()[0][1].shape());
    }
}
