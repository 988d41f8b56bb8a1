use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::tensor::Tensor;

/// Learning-rate group a parameter belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ParamGroup {
    Conv,
    /// fc4 and fc5.
    Fc,
    /// The domain-specific classification layers.
    Fc6,
    /// Never updated.
    Frozen,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SgdConfig {
    pub conv_lr: f64,
    pub fc_lr: f64,
    pub fc6_lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
}

impl Default for SgdConfig {
    fn default() -> Self {
        SgdConfig {
            conv_lr: 1e-4,
            fc_lr: 1e-4,
            fc6_lr: 1e-3,
            momentum: 0.9,
            weight_decay: 5e-4,
        }
    }
}

impl SgdConfig {
    pub fn lr(&self, group: ParamGroup) -> f64 {
        match group {
            ParamGroup::Conv => self.conv_lr,
            ParamGroup::Fc => self.fc_lr,
            ParamGroup::Fc6 => self.fc6_lr,
            ParamGroup::Frozen => 0.0,
        }
    }
}

/// SGD with heavy-ball momentum and L2 weight decay:
/// `v <- momentum * v + (g + weight_decay * p)`, `p <- p - lr * v`.
///
/// Velocity is kept per parameter name and only advances for parameters
/// that receive a gradient in a step.
#[derive(Debug, Clone, Default)]
pub struct Sgd {
    pub config: SgdConfig,
    velocity: HashMap<String, Tensor>,
}

impl Sgd {
    pub fn new(config: SgdConfig) -> Self {
        Sgd {
            config,
            velocity: HashMap::new(),
        }
    }

    pub fn step(&mut self, name: &str, group: ParamGroup, param: &mut Tensor, grad: &Tensor) {
        let lr = self.config.lr(group);
        if group == ParamGroup::Frozen {
            return;
        }
        let (mu, wd) = (self.config.momentum, self.config.weight_decay);
        let v = self
            .velocity
            .entry(name.to_string())
            .or_insert_with(|| Tensor::zeros(param.shape()));
        for ((p, g), v) in param.data_mut().iter_mut().zip(grad.data()).zip(v.data_mut()) {
            *v = mu * *v + g + wd * *p;
            *p -= lr * *v;
        }
    }

    pub fn reset(&mut self) {
        self.velocity.clear();
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn plain(lr: f64, momentum: f64) -> Sgd {
        Sgd::new(SgdConfig {
            conv_lr: lr,
            fc_lr: lr,
            fc6_lr: lr,
            momentum,
            weight_decay: 0.0,
        })
    }

    #[test]
    fn zero_gradient_is_a_no_op() {
        let mut sgd = plain(0.1, 0.9);
        let mut p = Tensor::full(&[3], 1.5);
        sgd.step("p", ParamGroup::Fc, &mut p, &Tensor::zeros(&[3]));
        assert_eq!(p.data(), &[1.5; 3]);
    }

    #[test]
    fn scalar_step() {
        let mut sgd = plain(0.1, 0.0);
        let mut p = Tensor::full(&[1], 1.0);
        sgd.step("p", ParamGroup::Conv, &mut p, &Tensor::full(&[1], 1.0));
        assert!((p.data()[0] - 0.9).abs() < 1e-15);
    }

    #[test]
    fn momentum_unrolls() {
        let (lr, g) = (0.01, 2.0);
        let mut sgd = plain(lr, 0.9);
        let mut p = Tensor::full(&[1], 0.0);
        let grad = Tensor::full(&[1], g);
        sgd.step("p", ParamGroup::Fc6, &mut p, &grad);
        let after_one = p.data()[0];
        sgd.step("p", ParamGroup::Fc6, &mut p, &grad);
        let delta2 = after_one - p.data()[0];
        assert!((delta2 - lr * (g + 0.9 * g)).abs() < 1e-15);
    }

    #[test]
    fn group_rates_and_frozen() {
        let cfg = SgdConfig::default();
        assert_eq!(cfg.lr(ParamGroup::Conv), 1e-4);
        assert_eq!(cfg.lr(ParamGroup::Fc), 1e-4);
        assert_eq!(cfg.lr(ParamGroup::Fc6), 1e-3);
        let mut sgd = Sgd::new(cfg);
        let mut p = Tensor::full(&[2], 1.0);
        sgd.step("p", ParamGroup::Frozen, &mut p, &Tensor::full(&[2], 5.0));
        assert_eq!(p.data(), &[1.0, 1.0]);
    }
}
