use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use super::{Gradients, Network, ParamSet};
use crate::error::{Error, Result};

/// SGD with heavy-ball momentum and L2 weight decay folded into the gradient:
/// `g ← g + λθ`, `v ← μv + g`, `θ ← θ − lr·v`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Sgd {
    pub momentum: f64,
    pub weight_decay: f64,
    velocity: Option<ParamSet>,
}

impl Sgd {
    pub fn new(momentum: f64, weight_decay: f64) -> Result<Self> {
        if !(0.0..1.0).contains(&momentum) {
            return Err(Error::Config(format!("momentum must lie in [0, 1), got {momentum}")));
        }
        if !(weight_decay >= 0.0) {
            return Err(Error::Config(format!("weight decay must be >= 0, got {weight_decay}")));
        }
        Ok(Sgd {
            momentum,
            weight_decay,
            velocity: None,
        })
    }

    pub fn velocity(&self) -> Option<&ParamSet> {
        self.velocity.as_ref()
    }

    pub fn step(&mut self, net: &mut Network, grads: &Gradients, lr: f64) -> Result<()> {
        if !(lr >= 0.0) || !lr.is_finite() {
            return Err(Error::Usage(format!("learning rate must be finite and >= 0, got {lr}")));
        }
        if !net.params.same_layout(grads) {
            return Err(Error::Shape("gradient layout does not match the network".into()));
        }
        if !grads.is_finite() {
            return Err(Error::Training("non-finite gradient".into()));
        }
        let velocity = self
            .velocity
            .get_or_insert_with(|| ParamSet::zeros_like(grads));
        let (mu, wd) = (self.momentum, self.weight_decay);
        let g_all = grads.tensors();
        let mut v_all = velocity.tensors_mut();
        let mut p_all = net.params.tensors_mut();
        for ((p, v), g) in p_all.iter_mut().zip(v_all.iter_mut()).zip(g_all) {
            for ((pi, vi), &gi) in p.iter_mut().zip(v.iter_mut()).zip(g) {
                let g = gi + wd * *pi;
                *vi = mu * *vi + g;
                *pi -= lr * *vi;
            }
        }
        Ok(())
    }
}

/// Cosine annealing from `base_lr` toward zero over `total_epochs`.
pub fn cosine_lr(epoch: usize, total_epochs: usize, base_lr: f64) -> Result<f64> {
    if total_epochs == 0 {
        return Err(Error::Usage("total_epochs must be positive".into()));
    }
    if epoch >= total_epochs {
        return Err(Error::Usage(format!("epoch {epoch} outside 0..{total_epochs}")));
    }
    Ok(base_lr * (1.0 + (PI * epoch as f64 / total_epochs as f64).cos()) / 2.0)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one_param_net(value: f64) -> Network {
        let mut net = Network::zeros(1, &[], 1, 1);
        net.params.q_head.weight.data_mut()[0] = value;
        net
    }

    fn grad_on_q_weight(net: &Network, g: f64) -> Gradients {
        let mut grads = ParamSet::zeros_like(&net.params);
        grads.q_head.weight.data_mut()[0] = g;
        grads
    }

    #[test]
    fn vanilla_step() {
        let mut net = one_param_net(1.0);
        let g = grad_on_q_weight(&net, 0.5);
        Sgd::new(0.0, 0.0).unwrap().step(&mut net, &g, 0.1).unwrap();
        assert!((net.params.q_head.weight.data()[0] - 0.95).abs() < 1e-15);
    }

    #[test]
    fn momentum_second_step_is_one_point_nine() {
        let mut net = one_param_net(0.0);
        let g = grad_on_q_weight(&net, 1.0);
        let mut opt = Sgd::new(0.9, 0.0).unwrap();
        opt.step(&mut net, &g, 0.1).unwrap();
        let after_first = net.params.q_head.weight.data()[0];
        opt.step(&mut net, &g, 0.1).unwrap();
        let second = after_first - net.params.q_head.weight.data()[0];
        assert!((second - 0.1 * 1.9).abs() < 1e-15);
    }

    #[test]
    fn zero_lr_is_a_noop() {
        let mut net = one_param_net(0.3);
        let before = net.clone();
        let g = grad_on_q_weight(&net, 2.0);
        Sgd::new(0.9, 1e-4).unwrap().step(&mut net, &g, 0.0).unwrap();
        assert_eq!(net, before);
    }

    #[test]
    fn weight_decay_pulls_toward_zero() {
        let mut net = one_param_net(2.0);
        let g = grad_on_q_weight(&net, 0.0);
        Sgd::new(0.0, 0.5).unwrap().step(&mut net, &g, 0.1).unwrap();
        assert!((net.params.q_head.weight.data()[0] - 1.9).abs() < 1e-15);
    }

    #[test]
    fn non_finite_gradient_aborts() {
        let mut net = one_param_net(0.0);
        let g = grad_on_q_weight(&net, f64::NAN);
        let r = Sgd::new(0.9, 0.0).unwrap().step(&mut net, &g, 0.1);
        assert!(matches!(r, Err(Error::Training(_))));
    }

    #[test]
    fn bad_hyperparameters() {
        assert!(Sgd::new(1.0, 0.0).is_err());
        assert!(Sgd::new(0.5, -1.0).is_err());
    }

    #[test]
    fn cosine_schedule() {
        assert_eq!(cosine_lr(0, 130, 3e-4).unwrap(), 3e-4);
        assert!((cosine_lr(65, 130, 3e-4).unwrap() - 1.5e-4).abs() < 1e-18);
        assert!(cosine_lr(99_999, 100_000, 1.0).unwrap() < 1e-8);
        let lrs: Vec<f64> = (0..130).map(|e| cosine_lr(e, 130, 1.0).unwrap()).collect();
        assert!(lrs.windows(2).all(|w| w[1] <= w[0]));
        assert!(matches!(cosine_lr(0, 0, 1.0), Err(Error::Usage(_))));
        assert!(cosine_lr(130, 130, 1.0).is_err());
    }
}
