//! Adam and step learning-rate schedules.

use serde::{Deserialize, Serialize};

use crate::autograd::ParamStore;
use crate::error::{Error, Result};
use crate::tensor::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            beta1: 0.9,
            beta2: 0.99,
            eps: 1e-8,
        }
    }
}

/// Adam with bias correction, bound to one parameter store.
///
/// Parameters whose gradient is exactly zero are left untouched, moments
/// included, so a zero gradient is a no-op regardless of optimizer state.
#[derive(Debug, Clone)]
pub struct Adam<T> {
    config: AdamConfig,
    store_key: u64,
    step: u64,
    m: Vec<Vec<T>>,
    v: Vec<Vec<T>>,
}

impl<T: Scalar> Adam<T> {
    pub fn new(store: &ParamStore<T>, config: AdamConfig) -> Self {
        let zeros = || -> Vec<Vec<T>> { store.iter().map(|(_, p)| vec![T::zero(); p.numel()]).collect() };
        Adam {
            config,
            store_key: store.key(),
            step: 0,
            m: zeros(),
            v: zeros(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    pub fn first_moment(&self, id: usize) -> &[T] {
        &self.m[id]
    }

    pub fn second_moment(&self, id: usize) -> &[T] {
        &self.v[id]
    }

    /// Applies one update using the gradients accumulated in `store`, then
    /// zeroes them. Fails without touching anything if any gradient is
    /// non-finite.
    pub fn step(&mut self, store: &mut ParamStore<T>, lr: f64) -> Result<()> {
        if store.key() != self.store_key || store.len() != self.m.len() {
            return Err(Error::InvalidArgument(
                "optimizer used with a parameter store it was not created for".into(),
            ));
        }
        for (_, p) in store.iter() {
            if p.grad_slice().iter().any(|g| !g.is_finite()) {
                return Err(Error::NonFiniteGradient(p.name().to_string()));
            }
        }
        self.step += 1;
        let t = self.step as i32;
        let AdamConfig { beta1, beta2, eps } = self.config;
        let bc1 = T::of_f64(1.0 - beta1.powi(t));
        let bc2 = T::of_f64(1.0 - beta2.powi(t));
        let (b1, b2) = (T::of_f64(beta1), T::of_f64(beta2));
        let (one, lr, eps) = (T::one(), T::of_f64(lr), T::of_f64(eps));
        for id in 0..self.m.len() {
            let (value, grad) = store.value_and_grad_mut(id);
            if grad.iter().all(|g| g.is_zero()) {
                continue;
            }
            let (m, v) = (&mut self.m[id], &mut self.v[id]);
            for i in 0..value.len() {
                let g = grad[i];
                m[i] = b1 * m[i] + (one - b1) * g;
                v[i] = b2 * v[i] + (one - b2) * g * g;
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                value[i] = value[i] - lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        store.zero_grad();
        Ok(())
    }
}

/// Piecewise-constant learning rate. Every decay halves the rate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum LrSchedule {
    /// `initial * 2^-floor(step / period)`.
    PsnrStage {
        initial: f64,
        period: u64,
    },
    /// `initial * 2^-(number of milestones <= step)`.
    GanStage {
        initial: f64,
        milestones: Vec<u64>,
    },
    Constant {
        lr: f64,
    },
}

impl LrSchedule {
    pub fn psnr_stage() -> Self {
        LrSchedule::PsnrStage {
            initial: 2e-4,
            period: 250_000,
        }
    }

    pub fn gan_stage() -> Self {
        LrSchedule::GanStage {
            initial: 1e-4,
            milestones: vec![50_000, 100_000, 200_000, 300_000],
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = match self {
            LrSchedule::PsnrStage { initial, period } => *initial >= 0.0 && initial.is_finite() && *period > 0,
            LrSchedule::GanStage { initial, milestones } => {
                *initial >= 0.0 && initial.is_finite() && milestones.windows(2).all(|w| w[0] <= w[1])
            }
            LrSchedule::Constant { lr } => *lr >= 0.0 && lr.is_finite(),
        };
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid learning-rate schedule {self:?}")))
        }
    }

    pub fn lr_at(&self, step: u64) -> f64 {
        let (initial, halvings) = match self {
            LrSchedule::PsnrStage { initial, period } => (*initial, step / period),
            LrSchedule::GanStage { initial, milestones } => {
                (*initial, milestones.iter().filter(|&&m| step >= m).count() as u64)
            }
            LrSchedule::Constant { lr } => return *lr,
        };
        // Halving is exact in binary floating point until underflow.
        initial * 0.5f64.powi(halvings.min(i32::MAX as u64) as i32)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::{Graph, Tape};
    use crate::tensor::Tensor;
    use proptest::prelude::*;

    fn scalar_store(v: f64) -> (ParamStore<f64>, usize) {
        let mut store = ParamStore::new();
        let id = store.add("p", &[1], Tensor::scalar(v)).unwrap();
        (store, id)
    }

    fn set_grad(store: &mut ParamStore<f64>, id: usize, g: f64) {
        let tape = Tape::new();
        let p = tape.param(store, id);
        let loss = tape.mean_all(&tape.affine(&p, g, 0.0));
        let grads = tape.backward(loss).unwrap();
        store.accumulate(&grads);
    }

    #[test]
    fn first_step_moves_by_lr() {
        let (mut store, id) = scalar_store(0.0);
        let mut adam = Adam::new(&store, AdamConfig::default());
        set_grad(&mut store, id, 1.0);
        adam.step(&mut store, 0.1).unwrap();
        let p = store.value(id).item();
        assert!((p + 0.1).abs() < 1e-8, "{p}");
        assert_eq!(store.get(id).grad_slice(), &[0.0]);
    }

    #[test]
    fn zero_gradient_is_noop_even_with_momentum() {
        let (mut store, id) = scalar_store(0.5);
        let mut adam = Adam::new(&store, AdamConfig::default());
        set_grad(&mut store, id, 2.0);
        adam.step(&mut store, 0.1).unwrap();
        let before = store.value(id).clone();
        let m = adam.first_moment(id).to_vec();
        adam.step(&mut store, 0.1).unwrap();
        assert!(store.value(id).bitwise_eq(&before));
        assert_eq!(adam.first_moment(id), &m[..]);
    }

    #[test]
    fn non_finite_gradient_aborts() {
        let (mut store, id) = scalar_store(0.5);
        let mut adam = Adam::new(&store, AdamConfig::default());
        set_grad(&mut store, id, f64::INFINITY);
        let err = adam.step(&mut store, 0.1).unwrap_err();
        assert!(matches!(err, Error::NonFiniteGradient(ref n) if n == "p"));
        assert_eq!(store.value(id).item(), 0.5);
        assert_eq!(adam.steps_taken(), 0);
    }

    #[test]
    fn rejects_foreign_store() {
        let (store, _) = scalar_store(0.5);
        let (mut other, _) = scalar_store(0.5);
        let mut adam = Adam::new(&store, AdamConfig::default());
        assert!(adam.step(&mut other, 0.1).is_err());
    }

    #[test]
    fn deterministic_runs() {
        let run = || {
            let (mut store, id) = scalar_store(1.0);
            let mut adam = Adam::new(&store, AdamConfig::default());
            for i in 0..10 {
                set_grad(&mut store, id, (i as f64 * 0.7).sin());
                adam.step(&mut store, 0.01).unwrap();
            }
            store.value(id).item()
        };
        assert_eq!(run().to_bits(), run().to_bits());
    }

    #[test]
    fn schedule_examples() {
        let p = LrSchedule::psnr_stage();
        assert_eq!(p.lr_at(0), 2e-4);
        assert_eq!(p.lr_at(249_999), 2e-4);
        assert_eq!(p.lr_at(250_000), 1e-4);
        assert_eq!(p.lr_at(500_000), 5e-5);
        let g = LrSchedule::gan_stage();
        assert_eq!(g.lr_at(49_999), 1e-4);
        assert_eq!(g.lr_at(50_000), 5e-5);
        assert_eq!(g.lr_at(299_999), 1.25e-5);
        assert_eq!(g.lr_at(300_000), 6.25e-6);
        assert_eq!(g.lr_at(u64::MAX), 6.25e-6);
    }

    #[test]
    fn schedule_validation() {
        assert!(LrSchedule::PsnrStage {
            initial: 1e-4,
            period: 0
        }
        .validate()
        .is_err());
        assert!(LrSchedule::GanStage {
            initial: 1e-4,
            milestones: vec![10, 5]
        }
        .validate()
        .is_err());
        assert!(LrSchedule::Constant { lr: -1.0 }.validate().is_err());
    }

    proptest! {
        #[test]
        fn schedules_are_non_increasing(a in 0u64..2_000_000, d in 0u64..2_000_000) {
            for s in [LrSchedule::psnr_stage(), LrSchedule::gan_stage()] {
                prop_assert!(s.lr_at(a + d) <= s.lr_at(a));
            }
        }

        #[test]
        fn adam_zero_grad_noop_for_any_state(v0 in -10.0f64..10.0, g0 in -5.0f64..5.0, steps in 0usize..5) {
            let (mut store, id) = scalar_store(v0);
            let mut adam = Adam::new(&store, AdamConfig::default());
            for _ in 0..steps {
                set_grad(&mut store, id, g0);
                adam.step(&mut store, 0.01).unwrap();
            }
            let before = store.value(id).clone();
            adam.step(&mut store, 0.01).unwrap();
            prop_assert!(store.value(id).bitwise_eq(&before));
        }
    }
}
