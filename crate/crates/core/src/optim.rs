//! SGD with momentum, Adam, and step learning-rate schedules.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::ParamStore;
use crate::pruning::Mask;
use crate::scalar::Scalar;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum OptimError {
    #[error("invalid optimizer config: {0}")]
    InvalidConfig(String),
    #[error("invalid schedule: {0}")]
    InvalidSchedule(String),
    #[error("parameter `{0}` has no gradient")]
    MissingGradient(String),
    #[error("state for `{name}` has {actual} entries, parameter has {expected}")]
    StateShape {
        name: String,
        expected: usize,
        actual: usize,
    },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    SgdMomentum,
    Adam,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimizerConfig {
    pub kind: OptimizerKind,
    pub lr: f64,
    #[serde(default)]
    pub momentum: f64,
    #[serde(default = "default_betas")]
    pub betas: (f64, f64),
    #[serde(default)]
    pub weight_decay: f64,
    #[serde(default = "default_epsilon")]
    pub epsilon: f64,
    /// Apply weight decay to batch-norm scale and shift.
    #[serde(default = "default_true")]
    pub decay_bn: bool,
}

fn default_betas() -> (f64, f64) {
    (0.9, 0.999)
}

fn default_epsilon() -> f64 {
    1e-8
}

fn default_true() -> bool {
    true
}

impl OptimizerConfig {
    /// lr 0.1, momentum 0.9, weight decay 1e-4.
    pub fn sgd() -> Self {
        OptimizerConfig {
            kind: OptimizerKind::SgdMomentum,
            lr: 0.1,
            momentum: 0.9,
            betas: default_betas(),
            weight_decay: 1e-4,
            epsilon: default_epsilon(),
            decay_bn: true,
        }
    }

    /// lr 3e-4, betas (0.9, 0.999), weight decay 1e-4.
    pub fn adam() -> Self {
        OptimizerConfig {
            kind: OptimizerKind::Adam,
            lr: 3e-4,
            momentum: 0.0,
            betas: default_betas(),
            weight_decay: 1e-4,
            epsilon: default_epsilon(),
            decay_bn: true,
        }
    }

    pub fn validate(&self) -> Result<(), OptimError> {
        let bad = |m: String| Err(OptimError::InvalidConfig(m));
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return bad(format!("lr must be positive, got {}", self.lr));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad(format!("momentum must lie in [0, 1), got {}", self.momentum));
        }
        let (b1, b2) = self.betas;
        if !(b1 > 0.0 && b1 < 1.0 && b2 > 0.0 && b2 < 1.0) {
            return bad(format!("betas must lie in (0, 1), got ({b1}, {b2})"));
        }
        if !(self.weight_decay.is_finite() && self.weight_decay >= 0.0) {
            return bad(format!("weight_decay must be nonnegative, got {}", self.weight_decay));
        }
        if !(self.epsilon.is_finite() && self.epsilon > 0.0) {
            return bad(format!("epsilon must be positive, got {}", self.epsilon));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LrSchedule {
    pub milestones: Vec<usize>,
    pub decay_factor: f64,
}

impl LrSchedule {
    pub fn new(milestones: Vec<usize>, decay_factor: f64) -> Result<Self, OptimError> {
        let s = LrSchedule {
            milestones,
            decay_factor,
        };
        s.validate()?;
        Ok(s)
    }

    /// Constant learning rate.
    pub fn constant() -> Self {
        LrSchedule {
            milestones: Vec::new(),
            decay_factor: 1.0,
        }
    }

    /// Divide by 10 at epochs 80 and 120.
    pub fn vgg() -> Self {
        LrSchedule {
            milestones: vec![80, 120],
            decay_factor: 10.0,
        }
    }

    /// Divide by 10 at epochs 50, 65 and 80.
    pub fn resnet() -> Self {
        LrSchedule {
            milestones: vec![50, 65, 80],
            decay_factor: 10.0,
        }
    }

    pub fn validate(&self) -> Result<(), OptimError> {
        if !(self.decay_factor.is_finite() && self.decay_factor > 0.0) {
            return Err(OptimError::InvalidSchedule(format!(
                "decay_factor must be positive, got {}",
                self.decay_factor
            )));
        }
        if self.milestones.windows(2).any(|w| w[0] >= w[1]) {
            return Err(OptimError::InvalidSchedule(format!(
                "milestones must be strictly increasing, got {:?}",
                self.milestones
            )));
        }
        Ok(())
    }

    pub fn lr_at(&self, base_lr: f64, epoch: usize) -> f64 {
        let passed = self.milestones.iter().filter(|&&m| m <= epoch).count();
        base_lr / self.decay_factor.powi(passed as i32)
    }
}

#[derive(Clone, Debug, Default)]
struct Slot<T> {
    first: Vec<T>,
    second: Vec<T>,
}

/// Per-parameter auxiliary buffers, created lazily on the first step.
#[derive(Clone, Debug)]
pub struct Optimizer<T> {
    config: OptimizerConfig,
    slots: HashMap<String, Slot<T>>,
    steps: u64,
}

impl<T: Scalar> Optimizer<T> {
    pub fn new(config: OptimizerConfig) -> Result<Self, OptimError> {
        config.validate()?;
        Ok(Optimizer {
            config,
            slots: HashMap::new(),
            steps: 0,
        })
    }

    pub fn config(&self) -> &OptimizerConfig {
        &self.config
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    /// Momentum buffer (SGD) or first moment (Adam) of one parameter.
    pub fn first_moment(&self, name: &str) -> Option<&[T]> {
        self.slots.get(name).map(|s| s.first.as_slice())
    }

    /// Second moment estimate (Adam only).
    pub fn second_moment(&self, name: &str) -> Option<&[T]> {
        self.slots.get(name).map(|s| s.second.as_slice())
    }

    /// One update of every trainable parameter at learning rate `lr`.
    /// Coordinates with mask 0 are skipped, so their values and buffers
    /// never change.
    pub fn step(&mut self, params: &mut ParamStore<T>, mask: &Mask, lr: f64) -> Result<(), OptimError> {
        for (name, p) in params.iter() {
            if p.kind.is_trainable() && p.tensor.grad().is_none() {
                return Err(OptimError::MissingGradient(name.to_string()));
            }
        }
        self.steps += 1;
        let cfg = &self.config;
        let lr = T::lit(lr);
        let kind = cfg.kind;
        let mu = T::lit(cfg.momentum);
        let (b1, b2) = (T::lit(cfg.betas.0), T::lit(cfg.betas.1));
        let eps = T::lit(cfg.epsilon);
        let bc1 = T::one() - b1.powi(self.steps as i32);
        let bc2 = T::one() - b2.powi(self.steps as i32);
        for (name, p) in params.iter_mut() {
            if !p.kind.is_trainable() {
                continue;
            }
            let decay = if p.kind.is_batch_norm() && !cfg.decay_bn {
                T::zero()
            } else {
                T::lit(cfg.weight_decay)
            };
            let n = p.tensor.len();
            let slot = self.slots.entry(name.to_string()).or_insert_with(|| Slot {
                first: vec![T::zero(); n],
                second: if kind == OptimizerKind::Adam {
                    vec![T::zero(); n]
                } else {
                    Vec::new()
                },
            });
            if slot.first.len() != n {
                return Err(OptimError::StateShape {
                    name: name.to_string(),
                    expected: n,
                    actual: slot.first.len(),
                });
            }
            let keep = mask.get(name).map(|m| m.bits());
            let grad = p.tensor.grad().map(<[T]>::to_vec).unwrap_or_default();
            let w = p.tensor.data_mut();
            for i in 0..n {
                if keep.is_some_and(|k| !k[i]) {
                    continue;
                }
                let g = grad[i] + decay * w[i];
                match kind {
                    OptimizerKind::SgdMomentum => {
                        let v = mu * slot.first[i] + g;
                        slot.first[i] = v;
                        w[i] -= lr * v;
                    }
                    OptimizerKind::Adam => {
                        let m = b1 * slot.first[i] + (T::one() - b1) * g;
                        let v = b2 * slot.second[i] + (T::one() - b2) * g * g;
                        slot.first[i] = m;
                        slot.second[i] = v;
                        w[i] -= lr * (m / bc1) / ((v / bc2).sqrt() + eps);
                    }
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ParamKind;
    use crate::tensor::Tensor;

    fn store(w: &[f64]) -> ParamStore<f64> {
        let mut p = ParamStore::new();
        p.insert("w", Tensor::new(vec![w.len()], w.to_vec()).unwrap(), ParamKind::Weight);
        p
    }

    fn set_grad(p: &mut ParamStore<f64>, g: &[f64]) {
        p.tensor_mut("w").unwrap().set_grad(g.to_vec()).unwrap();
    }

    fn sgd(lr: f64, momentum: f64, wd: f64) -> Optimizer<f64> {
        Optimizer::new(OptimizerConfig {
            lr,
            momentum,
            weight_decay: wd,
            ..OptimizerConfig::sgd()
        })
        .unwrap()
    }

    #[test]
    fn momentum_unrolls() {
        let mut p = store(&[0.0]);
        let mask = Mask::dense(&p);
        let mut opt = sgd(0.1, 0.9, 0.0);
        set_grad(&mut p, &[1.0]);
        opt.step(&mut p, &mask, 0.1).unwrap();
        let w1 = p.tensor("w").unwrap().data()[0];
        assert!((w1 + 0.1).abs() < 1e-15);
        opt.step(&mut p, &mask, 0.1).unwrap();
        let w2 = p.tensor("w").unwrap().data()[0];
        assert!((w2 - w1 + 0.19).abs() < 1e-15);
    }

    #[test]
    fn decay_only_step() {
        let mut p = store(&[1.0]);
        let mask = Mask::dense(&p);
        let mut opt = sgd(0.1, 0.0, 1e-4);
        set_grad(&mut p, &[0.0]);
        opt.step(&mut p, &mask, 0.1).unwrap();
        assert!((p.tensor("w").unwrap().data()[0] - (1.0 - 1e-5)).abs() < 1e-15);
    }

    #[test]
    fn masked_coordinate_frozen() {
        let mut p = store(&[0.3, -0.7]);
        let mask = Mask::from_bits(vec![("w".into(), vec![2], vec![true, false])]).unwrap();
        for cfg in [OptimizerConfig::sgd(), OptimizerConfig::adam()] {
            let mut q = p.clone();
            let mut opt = Optimizer::new(cfg).unwrap();
            for _ in 0..25 {
                set_grad(&mut q, &[0.5, 0.0]);
                opt.step(&mut q, &mask, 0.1).unwrap();
            }
            assert_eq!(q.tensor("w").unwrap().data()[1].to_bits(), (-0.7f64).to_bits());
            assert_eq!(opt.first_moment("w").unwrap()[1], 0.0);
        }
        set_grad(&mut p, &[0.0, 0.0]);
    }

    #[test]
    fn missing_gradient_is_an_error() {
        let mut p = store(&[1.0]);
        let mask = Mask::dense(&p);
        let mut opt = sgd(0.1, 0.9, 0.0);
        assert_eq!(
            opt.step(&mut p, &mask, 0.1),
            Err(OptimError::MissingGradient("w".into()))
        );
    }

    #[test]
    fn adam_first_step_is_lr_sized_and_scale_free() {
        let mut p = store(&[0.0, 0.0, 0.0]);
        let mask = Mask::dense(&p);
        let cfg = OptimizerConfig {
            weight_decay: 0.0,
            ..OptimizerConfig::adam()
        };
        let mut opt = Optimizer::new(cfg).unwrap();
        set_grad(&mut p, &[0.25, 0.5, -3.0]);
        opt.step(&mut p, &mask, 3e-4).unwrap();
        let w = p.tensor("w").unwrap().data();
        for &v in w {
            assert!((v.abs() - 3e-4).abs() < 1e-9, "{v}");
        }
        assert!((w[0] - w[1]).abs() < 1e-10);
        assert!(w[2] > 0.0);
    }

    #[test]
    fn adam_zero_gradient_keeps_weights() {
        let mut p = store(&[0.4, -1.2]);
        let mask = Mask::dense(&p);
        let cfg = OptimizerConfig {
            weight_decay: 0.0,
            ..OptimizerConfig::adam()
        };
        let mut opt = Optimizer::new(cfg).unwrap();
        for _ in 0..10 {
            set_grad(&mut p, &[0.0, 0.0]);
            opt.step(&mut p, &mask, 3e-4).unwrap();
        }
        assert_eq!(p.tensor("w").unwrap().data(), &[0.4, -1.2]);
    }

    #[test]
    fn schedules() {
        let vgg = LrSchedule::vgg();
        assert_eq!(vgg.lr_at(0.1, 0), 0.1);
        assert!((vgg.lr_at(0.1, 100) - 0.01).abs() < 1e-15);
        assert!((vgg.lr_at(0.1, 80) - 0.01).abs() < 1e-15);
        assert!((vgg.lr_at(0.1, 79) - 0.1).abs() < 1e-15);
        assert!((LrSchedule::resnet().lr_at(0.1, 85) - 1e-4).abs() < 1e-15);
        assert!(LrSchedule::new(vec![5, 5], 10.0).is_err());
        assert!(LrSchedule::new(vec![5], 0.0).is_err());
    }

    #[test]
    fn config_bounds() {
        let mut c = OptimizerConfig::sgd();
        c.momentum = 1.0;
        assert!(c.validate().is_err());
        let mut c = OptimizerConfig::adam();
        c.betas = (0.9, 1.0);
        assert!(c.validate().is_err());
        let mut c = OptimizerConfig::sgd();
        c.lr = 0.0;
        assert!(c.validate().is_err());
    }
}
