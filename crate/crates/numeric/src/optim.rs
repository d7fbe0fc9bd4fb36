use serde::{Deserialize, Serialize};

use crate::error::{NumericError, Result};
use crate::params::ParamStore;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First and second moment estimates, one pair per parameter.
#[derive(Clone, Debug)]
pub struct AdamState {
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
    pub step: u64,
}

impl AdamState {
    pub fn new(store: &ParamStore) -> Self {
        let m: Vec<Tensor> = store.iter().map(|p| Tensor::zeros(p.value.shape())).collect();
        Self {
            v: m.clone(),
            m,
            step: 0,
        }
    }
}

/// One bias-corrected Adam update using the gradients held in `store`.
/// Frozen parameters are left untouched and their moments do not advance.
pub fn adam_step(store: &mut ParamStore, state: &mut AdamState, cfg: &AdamConfig) -> Result<()> {
    if state.m.len() != store.len() {
        return Err(NumericError::Invalid(format!(
            "optimizer state tracks {} parameters, store has {}",
            state.m.len(),
            store.len()
        )));
    }
    for (p, m) in store.iter().zip(&state.m) {
        if p.value.shape() != m.shape() {
            return Err(NumericError::Invalid(format!("optimizer state shape mismatch for `{}`", p.name)));
        }
        if !p.frozen && !p.grad.is_finite() {
            return Err(NumericError::NonFinite(format!("gradient of `{}`", p.name)));
        }
    }
    state.step += 1;
    let t = state.step as f64;
    let bc1 = 1.0 - cfg.beta1.powf(t);
    let bc2 = 1.0 - cfg.beta2.powf(t);
    for ((p, m), v) in store.iter_mut().zip(&mut state.m).zip(&mut state.v) {
        if p.frozen {
            continue;
        }
        let g = p.grad.data();
        let md = m.data_mut();
        let vd = v.data_mut();
        let w = p.value.data_mut();
        for i in 0..w.len() {
            md[i] = cfg.beta1 * md[i] + (1.0 - cfg.beta1) * g[i];
            vd[i] = cfg.beta2 * vd[i] + (1.0 - cfg.beta2) * g[i] * g[i];
            let m_hat = md[i] / bc1;
            let v_hat = vd[i] / bc2;
            w[i] -= cfg.lr * m_hat / (v_hat.sqrt() + cfg.eps);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_store(w: f64, g: f64) -> ParamStore {
        let mut s = ParamStore::new();
        let id = s.add("w", Tensor::scalar(w)).unwrap();
        s.get_mut(id).grad = Tensor::scalar(g);
        s
    }

    #[test]
    fn first_step_moves_by_lr() {
        let mut s = scalar_store(0.0, 1.0);
        let mut st = AdamState::new(&s);
        let cfg = AdamConfig {
            lr: 0.1,
            ..AdamConfig::default()
        };
        adam_step(&mut s, &mut st, &cfg).unwrap();
        // m_hat = v_hat = 1, so the step is lr / (1 + eps).
        let w = s.iter().next().unwrap().value.data()[0];
        assert!((w + 0.1 / (1.0 + 1e-8)).abs() < 1e-15);
    }

    #[test]
    fn zero_gradient_leaves_params_and_decays_moments() {
        let mut s = scalar_store(0.0, 1.0);
        let mut st = AdamState::new(&s);
        let cfg = AdamConfig::default();
        adam_step(&mut s, &mut st, &cfg).unwrap();
        let m1 = st.m[0].data()[0];
        let w1 = s.iter().next().unwrap().value.data()[0];
        s.zero_grads();
        adam_step(&mut s, &mut st, &cfg).unwrap();
        assert!((st.m[0].data()[0] - 0.9 * m1).abs() < 1e-15);
        // The decayed first moment still moves w; with a fresh state it would not.
        let mut fresh = scalar_store(0.5, 0.0);
        let mut fs = AdamState::new(&fresh);
        adam_step(&mut fresh, &mut fs, &cfg).unwrap();
        assert_eq!(fresh.iter().next().unwrap().value.data()[0], 0.5);
        assert!(w1 < 0.0);
    }

    #[test]
    fn identical_state_identical_update() {
        let mut a = scalar_store(0.3, -0.7);
        let mut b = a.clone();
        let mut sa = AdamState::new(&a);
        let mut sb = sa.clone();
        let cfg = AdamConfig::default();
        adam_step(&mut a, &mut sa, &cfg).unwrap();
        adam_step(&mut b, &mut sb, &cfg).unwrap();
        assert!(a.bitwise_eq(&b));
    }

    #[test]
    fn rejects_non_finite_gradient() {
        let mut s = scalar_store(0.0, 0.0);
        s.iter_mut().next().unwrap().grad.data_mut()[0] = f64::INFINITY;
        let mut st = AdamState::new(&s);
        assert!(adam_step(&mut s, &mut st, &AdamConfig::default()).is_err());
    }

    #[test]
    fn frozen_params_do_not_move() {
        let mut s = scalar_store(1.0, 5.0);
        s.set_frozen(true);
        let mut st = AdamState::new(&s);
        adam_step(&mut s, &mut st, &AdamConfig::default()).unwrap();
        assert_eq!(s.iter().next().unwrap().value.data()[0], 1.0);
    }
}
