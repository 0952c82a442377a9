//! Adam with bias correction at a fixed learning rate.

use crate::error::{Error, Result};
use crate::model::checkpoint::AdamSnapshot;
use crate::model::ParamStore;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            learning_rate: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

/// Optimizer state: step counter plus first/second moments mirroring the
/// parameter buffers.
pub struct Adam {
    pub config: AdamConfig,
    step: u64,
    first: Vec<Vec<f64>>,
    second: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(store: &ParamStore, config: AdamConfig) -> Adam {
        Adam {
            config,
            step: 0,
            first: store.iter().map(|p| vec![0.0; p.values.len()]).collect(),
            second: store.iter().map(|p| vec![0.0; p.values.len()]).collect(),
        }
    }

    pub fn from_snapshot(snapshot: AdamSnapshot, config: AdamConfig) -> Adam {
        Adam {
            config,
            step: snapshot.step,
            first: snapshot.first_moment,
            second: snapshot.second_moment,
        }
    }

    pub fn snapshot(&self) -> AdamSnapshot {
        AdamSnapshot {
            step: self.step,
            first_moment: self.first.clone(),
            second_moment: self.second.clone(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// One update over every parameter. Gradients must align with the
    /// store; a non-finite gradient aborts the step naming the parameter.
    pub fn step(&mut self, store: &mut ParamStore, grads: &[Vec<f64>]) -> Result<()> {
        assert_eq!(grads.len(), store.len(), "gradient buffers misaligned");
        for (i, g) in grads.iter().enumerate() {
            if g.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite(format!(
                    "gradient of parameter '{}'",
                    store.get(i).name
                )));
            }
        }
        self.step += 1;
        let t = self.step as i32;
        let c = self.config;
        let bias1 = 1.0 - c.beta1.powi(t);
        let bias2 = 1.0 - c.beta2.powi(t);
        for (i, g) in grads.iter().enumerate() {
            let m = &mut self.first[i];
            let v = &mut self.second[i];
            let p = store.values_mut(i);
            for j in 0..g.len() {
                m[j] = c.beta1 * m[j] + (1.0 - c.beta1) * g[j];
                v[j] = c.beta2 * v[j] + (1.0 - c.beta2) * g[j] * g[j];
                let m_hat = m[j] / bias1;
                let v_hat = v[j] / bias2;
                p[j] -= c.learning_rate * m_hat / (v_hat.sqrt() + c.epsilon);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{Model, ModelConfig};
    use approx::assert_abs_diff_eq;

    fn scalar_store(value: f64) -> ParamStore {
        let mut store = ParamStore::default();
        store.add("w", vec![1], vec![value]);
        store
    }

    #[test]
    fn zero_gradient_is_a_fixed_point() {
        let mut store = scalar_store(1.5);
        let mut adam = Adam::new(&store, AdamConfig::default());
        for _ in 0..10 {
            adam.step(&mut store, &[vec![0.0]]).unwrap();
        }
        assert_eq!(store.get(0).values[0], 1.5);
    }

    #[test]
    fn first_step_magnitude_is_learning_rate() {
        // after bias correction the first step is about -lr, whatever |g|
        // (the epsilon in the denominator shaves ~1% off at |g| = 1e-6)
        for g in [1e-6, 0.1, 3.0, 1e4] {
            let mut store = scalar_store(0.0);
            let mut adam = Adam::new(&store, AdamConfig::default());
            adam.step(&mut store, &[vec![g]]).unwrap();
            let moved = store.get(0).values[0];
            assert_abs_diff_eq!(moved, -1e-4, epsilon = 2e-6);
        }
    }

    #[test]
    fn quadratic_bowl_converges() {
        // f(w) = w^2, grad 2w, 500 steps at lr 0.01 from w0 = 1
        let mut store = scalar_store(1.0);
        let mut adam = Adam::new(
            &store,
            AdamConfig {
                learning_rate: 0.01,
                ..AdamConfig::default()
            },
        );
        for _ in 0..500 {
            let w = store.get(0).values[0];
            adam.step(&mut store, &[vec![2.0 * w]]).unwrap();
        }
        let w = store.get(0).values[0];
        assert!(w.abs() < 0.1, "w = {w}");
    }

    #[test]
    fn non_finite_gradient_aborts_with_name() {
        let mut store = scalar_store(1.0);
        let mut adam = Adam::new(&store, AdamConfig::default());
        let err = adam.step(&mut store, &[vec![f64::NAN]]).unwrap_err();
        assert!(format!("{err}").contains("'w'"));
        assert_eq!(adam.step_count(), 0);
        assert_eq!(store.get(0).values[0], 1.0);
    }

    #[test]
    fn snapshot_roundtrip_resumes_identically() {
        let model = Model::new(ModelConfig::shrunken(), 5).unwrap();
        let mut store_a = model.store.clone();
        let grads: Vec<Vec<f64>> = store_a
            .iter()
            .map(|p| p.values.iter().map(|v| v * 0.1 + 0.01).collect())
            .collect();

        let mut adam_a = Adam::new(&store_a, AdamConfig::default());
        adam_a.step(&mut store_a, &grads).unwrap();
        let snap = adam_a.snapshot();
        let mut adam_b = Adam::from_snapshot(snap, AdamConfig::default());
        // continue both from the same state
        let mut store_a2 = store_a.clone();
        adam_a.step(&mut store_a2, &grads).unwrap();
        adam_b.step(&mut store_a, &grads).unwrap();
        for i in 0..store_a.len() {
            assert_eq!(store_a.get(i).values, store_a2.get(i).values);
        }
    }
}
