use serde::{Deserialize, Serialize};

use super::params::ParamStore;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 0.005,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-4,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
struct Moments {
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
}

/// Adam with bias correction and decoupled weight decay.
///
/// A parameter whose gradient is `None` for a step is left untouched,
/// including its moments and decay, so parameters that never took part in a
/// forward pass stay bit-identical.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub config: AdamConfig,
    moments: Vec<Option<Moments>>,
    steps: u64,
}

impl AdamState {
    pub fn new(config: AdamConfig, store: &ParamStore) -> Self {
        Self {
            config,
            moments: vec![None; store.len()],
            steps: 0,
        }
    }

    /// Number of applied steps.
    pub fn steps(&self) -> u64 {
        self.steps
    }

    /// Per-parameter update count used for bias correction.
    pub fn param_steps(&self, index: usize) -> u64 {
        self.moments[index].as_ref().map_or(0, |m| m.t)
    }

    pub fn step(&mut self, store: &mut ParamStore, grads: &[Option<Vec<f64>>]) -> Result<()> {
        let AdamConfig {
            lr,
            beta1,
            beta2,
            eps,
            weight_decay,
        } = self.config;
        if !(lr > 0.0) {
            return Err(Error::Contract(format!("learning rate must be positive, got {lr}")));
        }
        if grads.len() != store.len() || self.moments.len() != store.len() {
            return Err(Error::shape(format!(
                "adam: {} gradients, {} moment slots for {} parameters",
                grads.len(),
                self.moments.len(),
                store.len()
            )));
        }
        for (id, grad) in store.ids().zip(grads) {
            if let Some(g) = grad {
                if g.len() != store.get(id).len() {
                    return Err(Error::shape(format!(
                        "adam: gradient of {} has {} entries, parameter has {}",
                        store.name(id),
                        g.len(),
                        store.get(id).len()
                    )));
                }
            }
        }
        for (id, grad) in store.ids().zip(grads) {
            let Some(g) = grad else { continue };
            let slot = self.moments[id.index()].get_or_insert_with(|| Moments {
                m: vec![0.0; g.len()],
                v: vec![0.0; g.len()],
                t: 0,
            });
            slot.t += 1;
            let c1 = 1.0 - beta1.powi(slot.t as i32);
            let c2 = 1.0 - beta2.powi(slot.t as i32);
            let p = store.get_mut(id).data_mut();
            for k in 0..g.len() {
                slot.m[k] = beta1 * slot.m[k] + (1.0 - beta1) * g[k];
                slot.v[k] = beta2 * slot.v[k] + (1.0 - beta2) * g[k] * g[k];
                let m_hat = slot.m[k] / c1;
                let v_hat = slot.v[k] / c2;
                p[k] -= lr * (m_hat / (v_hat.sqrt() + eps) + weight_decay * p[k]);
            }
        }
        self.steps += 1;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numcore::Array;

    fn store(vals: &[f64]) -> ParamStore {
        let mut s = ParamStore::new();
        s.add("w", Array::vector(vals.to_vec())).unwrap();
        s
    }

    #[test]
    fn zero_gradient_without_decay_is_identity() {
        let mut s = store(&[1.0, -2.0]);
        let mut st = AdamState::new(
            AdamConfig {
                weight_decay: 0.0,
                ..Default::default()
            },
            &s,
        );
        st.step(&mut s, &[Some(vec![0.0, 0.0])]).unwrap();
        assert_eq!(s.get(s.find("w").unwrap()).data(), &[1.0, -2.0]);
        assert_eq!(st.steps(), 1);
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        let mut s = store(&[0.0]);
        let mut st = AdamState::new(
            AdamConfig {
                weight_decay: 0.0,
                ..Default::default()
            },
            &s,
        );
        st.step(&mut s, &[Some(vec![0.3])]).unwrap();
        let delta = s.get(s.find("w").unwrap()).data()[0];
        assert!((delta + 0.005).abs() < 1e-9, "{delta}");
    }

    #[test]
    fn defaults() {
        let c = AdamConfig::default();
        assert_eq!((c.lr, c.beta1, c.beta2, c.eps, c.weight_decay), (0.005, 0.9, 0.999, 1e-8, 1e-4));
    }

    #[test]
    fn untouched_parameters_stay_put_and_counter_advances() {
        let mut s = store(&[1.0]);
        s.add("v", Array::vector(vec![2.0])).unwrap();
        let mut st = AdamState::new(AdamConfig::default(), &s);
        for k in 1..=3 {
            st.step(&mut s, &[Some(vec![0.1]), None]).unwrap();
            assert_eq!(st.steps(), k);
        }
        assert_eq!(s.get(s.find("v").unwrap()).data(), &[2.0]);
        assert_eq!(st.param_steps(0), 3);
        assert_eq!(st.param_steps(1), 0);
    }

    #[test]
    fn shape_mismatch_and_bad_lr() {
        let mut s = store(&[1.0, 2.0]);
        let mut st = AdamState::new(AdamConfig::default(), &s);
        assert!(matches!(st.step(&mut s, &[Some(vec![0.1])]), Err(Error::Shape(_))));
        st.config.lr = 0.0;
        assert!(matches!(st.step(&mut s, &[Some(vec![0.1, 0.1])]), Err(Error::Contract(_))));
    }
}
