use serde::{Deserialize, Serialize};

use super::params::{ParamId, ParamStore};
use super::tensor::Real;
use crate::error::{invalid, shape_err, Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum OptimizerKind {
    SgdMomentum { momentum: f64, weight_decay: f64 },
    Adam { beta1: f64, beta2: f64, epsilon: f64 },
}

impl OptimizerKind {
    pub fn adam() -> Self {
        OptimizerKind::Adam {
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

#[derive(Clone, Debug)]
enum Slot<T> {
    Velocity(Vec<T>),
    Moments { first: Vec<T>, second: Vec<T> },
}

/// Optimizer bound to a fixed set of trainable parameters.
#[derive(Clone, Debug)]
pub struct OptimizerState<T> {
    kind: OptimizerKind,
    learning_rate: f64,
    params: Vec<ParamId>,
    slots: Vec<Slot<T>>,
    step_count: u64,
}

impl<T: Real> OptimizerState<T> {
    /// Registers `params`. Frozen or duplicated parameters are rejected.
    pub fn new(
        kind: OptimizerKind,
        learning_rate: f64,
        store: &ParamStore<T>,
        params: &[ParamId],
    ) -> Result<Self> {
        if !(learning_rate > 0.0 && learning_rate.is_finite()) {
            return Err(invalid!("learning rate must be positive, got {learning_rate}"));
        }
        match kind {
            OptimizerKind::SgdMomentum {
                momentum,
                weight_decay,
            } => {
                if !(0.0..1.0).contains(&momentum) || weight_decay < 0.0 {
                    return Err(invalid!(
                        "sgd needs momentum in [0,1) and weight_decay >= 0, got {momentum}, {weight_decay}"
                    ));
                }
            }
            OptimizerKind::Adam {
                beta1,
                beta2,
                epsilon,
            } => {
                if !(0.0..1.0).contains(&beta1) || !(0.0..1.0).contains(&beta2) || epsilon <= 0.0 {
                    return Err(invalid!("invalid adam hyper-parameters"));
                }
            }
        }
        let mut seen = std::collections::HashSet::new();
        let mut slots = Vec::with_capacity(params.len());
        for &id in params {
            if !seen.insert(id) {
                return Err(invalid!("parameter `{}` registered twice", store.name(id)));
            }
            if store.is_frozen(id) {
                return Err(Error::FrozenParameter(store.name(id).to_owned()));
            }
            let n = store.value(id).numel();
            slots.push(match kind {
                OptimizerKind::SgdMomentum { .. } => Slot::Velocity(vec![T::zero(); n]),
                OptimizerKind::Adam { .. } => Slot::Moments {
                    first: vec![T::zero(); n],
                    second: vec![T::zero(); n],
                },
            });
        }
        Ok(Self {
            kind,
            learning_rate,
            params: params.to_vec(),
            slots,
            step_count: 0,
        })
    }

    pub fn kind(&self) -> OptimizerKind {
        self.kind
    }

    pub fn learning_rate(&self) -> f64 {
        self.learning_rate
    }

    pub fn set_learning_rate(&mut self, lr: f64) {
        self.learning_rate = lr;
    }

    pub fn step_count(&self) -> u64 {
        self.step_count
    }

    pub fn params(&self) -> &[ParamId] {
        &self.params
    }

    /// Applies one update to every registered parameter.
    ///
    /// All parameters are validated before any is modified.
    pub fn step(&mut self, store: &mut ParamStore<T>) -> Result<()> {
        for (&id, slot) in self.params.iter().zip(&self.slots) {
            let p = store.get(id);
            if p.frozen {
                return Err(Error::FrozenParameter(p.name.clone()));
            }
            let Some(grad) = &p.grad else {
                return Err(Error::MissingGradient(p.name.clone()));
            };
            let len = match slot {
                Slot::Velocity(v) => v.len(),
                Slot::Moments { first, .. } => first.len(),
            };
            if grad.numel() != len || p.value.numel() != len {
                return Err(shape_err!(
                    "parameter `{}` changed shape since registration",
                    p.name
                ));
            }
        }
        self.step_count += 1;
        let lr = T::lit(self.learning_rate);
        for (&id, slot) in self.params.iter().zip(self.slots.iter_mut()) {
            let p = store.get_mut(id);
            let grad = p.grad.as_ref().expect("validated").data();
            let weights = p.value.data_mut();
            match (self.kind, slot) {
                (
                    OptimizerKind::SgdMomentum {
                        momentum,
                        weight_decay,
                    },
                    Slot::Velocity(v),
                ) => {
                    let (mu, wd) = (T::lit(momentum), T::lit(weight_decay));
                    for ((w, &g), vel) in weights.iter_mut().zip(grad).zip(v.iter_mut()) {
                        *vel = mu * *vel + (g + wd * *w);
                        *w -= lr * *vel;
                    }
                }
                (
                    OptimizerKind::Adam {
                        beta1,
                        beta2,
                        epsilon,
                    },
                    Slot::Moments { first, second },
                ) => {
                    let t = self.step_count as i32;
                    let c1 = T::lit(1.0 - beta1.powi(t));
                    let c2 = T::lit(1.0 - beta2.powi(t));
                    let (b1, b2, eps) = (T::lit(beta1), T::lit(beta2), T::lit(epsilon));
                    for (((w, &g), m), v) in weights
                        .iter_mut()
                        .zip(grad)
                        .zip(first.iter_mut())
                        .zip(second.iter_mut())
                    {
                        *m = b1 * *m + (T::one() - b1) * g;
                        *v = b2 * *v + (T::one() - b2) * g * g;
                        let m_hat = *m / c1;
                        let v_hat = *v / c2;
                        *w -= lr * m_hat / (v_hat.sqrt() + eps);
                    }
                }
                _ => unreachable!("slot kind follows optimizer kind"),
            }
        }
        Ok(())
    }
}

/// Step decay: `lr = base · gamma^(number of milestones ≤ epoch)`, epochs 0-based.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MultiStepLr {
    pub base: f64,
    pub milestones: Vec<usize>,
    pub gamma: f64,
}

impl MultiStepLr {
    pub fn constant(base: f64) -> Self {
        Self {
            base,
            milestones: Vec::new(),
            gamma: 1.0,
        }
    }

    pub fn lr_at(&self, epoch: usize) -> f64 {
        let passed = self.milestones.iter().filter(|&&m| m <= epoch).count();
        self.base * self.gamma.powi(passed as i32)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Tensor;

    fn one_param(w: f64, g: f64) -> (ParamStore<f64>, ParamId) {
        let mut s = ParamStore::new();
        let id = s.add("w", Tensor::scalar(w)).unwrap();
        s.accumulate_grad(id, &[g]);
        (s, id)
    }

    fn sgd(momentum: f64, weight_decay: f64) -> OptimizerKind {
        OptimizerKind::SgdMomentum {
            momentum,
            weight_decay,
        }
    }

    #[test]
    fn vanilla_sgd_step() {
        let (mut s, id) = one_param(1.0, 2.0);
        let mut opt = OptimizerState::new(sgd(0.0, 0.0), 0.1, &s, &[id]).unwrap();
        opt.step(&mut s).unwrap();
        assert!((s.value(id).data()[0] - 0.8).abs() < 1e-12);
        assert_eq!(opt.step_count(), 1);
    }

    #[test]
    fn momentum_second_step_is_1_9x() {
        let (mut s, id) = one_param(0.0, 1.0);
        let mut opt = OptimizerState::new(sgd(0.9, 0.0), 0.1, &s, &[id]).unwrap();
        opt.step(&mut s).unwrap();
        let first = -s.value(id).data()[0];
        opt.step(&mut s).unwrap();
        let second = -s.value(id).data()[0] - first;
        assert!((second / first - 1.9).abs() < 1e-12);
        assert_eq!(opt.step_count(), 2);
    }

    #[test]
    fn weight_decay_enters_velocity() {
        let (mut s, id) = one_param(2.0, 0.0);
        let mut opt = OptimizerState::new(sgd(0.0, 0.5), 0.1, &s, &[id]).unwrap();
        opt.step(&mut s).unwrap();
        assert!((s.value(id).data()[0] - 1.9).abs() < 1e-12);
    }

    #[test]
    fn adam_first_step_is_lr_times_sign() {
        for g in [1e-3, 0.5, -7.0, 300.0] {
            let (mut s, id) = one_param(1.0, g);
            let mut opt = OptimizerState::new(OptimizerKind::adam(), 1e-3, &s, &[id]).unwrap();
            opt.step(&mut s).unwrap();
            let delta = s.value(id).data()[0] - 1.0;
            // closed form: -lr * g / (|g| + eps)
            let expected = -1e-3 * g / (g.abs() + 1e-8);
            assert!((delta - expected).abs() < 1e-15, "g={g}");
            assert!((delta + 1e-3 * g.signum()).abs() < 1e-7);
        }
    }

    #[test]
    fn frozen_registration_and_missing_grad_rejected() {
        let mut s = ParamStore::<f64>::new();
        let a = s.add("frozen.w", Tensor::scalar(1.0)).unwrap();
        let b = s.add("live.w", Tensor::scalar(1.0)).unwrap();
        s.freeze(a);
        match OptimizerState::new(sgd(0.9, 0.0), 0.1, &s, &[a]) {
            Err(Error::FrozenParameter(name)) => assert_eq!(name, "frozen.w"),
            other => panic!("unexpected {:?}", other.err()),
        }
        let mut opt = OptimizerState::new(sgd(0.9, 0.0), 0.1, &s, &[b]).unwrap();
        match opt.step(&mut s) {
            Err(Error::MissingGradient(name)) => assert_eq!(name, "live.w"),
            other => panic!("unexpected {other:?}"),
        }
        assert_eq!(opt.step_count(), 0);
    }

    #[test]
    fn milestone_schedule() {
        let sched = MultiStepLr {
            base: 1e-3,
            milestones: vec![55, 80],
            gamma: 0.1,
        };
        assert_eq!(sched.lr_at(0), 1e-3);
        assert_eq!(sched.lr_at(54), 1e-3);
        assert!((sched.lr_at(55) - 1e-4).abs() < 1e-18);
        assert!((sched.lr_at(99) - 1e-5).abs() < 1e-18);
    }
}
