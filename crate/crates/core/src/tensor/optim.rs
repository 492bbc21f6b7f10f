//! Adam optimizer with bias correction.

use crate::error::{Error, Result};
use crate::tensor::ParamStore;

/// Adam state for one parameter store. First and second moment estimates are
/// kept in the store's insertion order, so updates are deterministic.
#[derive(Debug, Clone)]
pub struct Adam {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    step: u64,
    store_id: Option<u64>,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(learning_rate: f64) -> Self {
        Adam {
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            step: 0,
            store_id: None,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Applies one update using the gradients currently held in `store`.
    /// Gradients are left untouched; the caller decides when to zero them.
    pub fn step(&mut self, store: &mut ParamStore) -> Result<()> {
        match self.store_id {
            None => {
                self.store_id = Some(store.id());
                self.m = store
                    .iter()
                    .map(|(_, t)| vec![0.0; t.len()])
                    .collect();
                self.v = self.m.clone();
            }
            Some(id) if id != store.id() => {
                return Err(Error::contract(
                    "Adam state was initialized for a different parameter store",
                ));
            }
            _ => {}
        }
        self.step += 1;
        let t = self.step as f64;
        let bc1 = 1.0 - self.beta1.powf(t);
        let bc2 = 1.0 - self.beta2.powf(t);

        for (slot, (_, tensor)) in store.iter_mut().enumerate() {
            let n = tensor.len();
            let grad: Vec<f64> = match tensor.grad() {
                Some(g) => g.to_vec(),
                None => continue,
            };
            let m = &mut self.m[slot];
            let v = &mut self.v[slot];
            let data = tensor.data_mut();
            for j in 0..n {
                let g = grad[j];
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * g;
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * g * g;
                let mhat = m[j] / bc1;
                let vhat = v[j] / bc2;
                data[j] -= self.learning_rate * mhat / (vhat.sqrt() + self.epsilon);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    #[test]
    fn first_step_moves_by_almost_learning_rate() {
        // With gradient 1 the bias-corrected first Adam step is
        // lr · 1 / (1 + eps) ≈ lr.
        let mut store = ParamStore::new();
        store.insert("w", Tensor::from_vec(vec![0.0])).unwrap();
        store.get_mut("w").unwrap().grad_mut()[0] = 1.0;
        let mut opt = Adam::new(0.1);
        opt.step(&mut store).unwrap();
        let w = store.get("w").unwrap().data()[0];
        assert!((w + 0.1).abs() < 1e-8, "w = {w}");
    }

    #[test]
    fn zero_gradient_leaves_parameters_unchanged() {
        let mut store = ParamStore::new();
        store.insert("w", Tensor::from_vec(vec![1.5, -2.5])).unwrap();
        let mut opt = Adam::new(0.1);
        opt.step(&mut store).unwrap();
        assert_eq!(store.get("w").unwrap().data(), &[1.5, -2.5]);
    }

    #[test]
    fn deterministic_across_identical_runs() {
        let run = || {
            let mut store = ParamStore::new();
            store
                .insert("w", Tensor::from_vec(vec![0.3, -0.7, 1.1]))
                .unwrap();
            let mut opt = Adam::new(0.01);
            for k in 0..100 {
                {
                    let t = store.get_mut("w").unwrap();
                    let vals: Vec<f64> = t.data().to_vec();
                    let g = t.grad_mut();
                    for (j, gj) in g.iter_mut().enumerate() {
                        // A fixed pseudo-gradient pattern.
                        *gj = (vals[j] * 2.0 + k as f64 * 0.01).sin();
                    }
                }
                opt.step(&mut store).unwrap();
            }
            store.get("w").unwrap().data().to_vec()
        };
        let a = run();
        let b = run();
        assert_eq!(a, b, "identical seeds and schedules must agree bitwise");
    }

    #[test]
    fn converges_on_quadratic() {
        // Minimize (w - 3)²; gradient is 2(w - 3).
        let mut store = ParamStore::new();
        store.insert("w", Tensor::from_vec(vec![0.0])).unwrap();
        let mut opt = Adam::new(0.05);
        for _ in 0..2000 {
            let w = store.get("w").unwrap().data()[0];
            store.get_mut("w").unwrap().grad_mut()[0] = 2.0 * (w - 3.0);
            opt.step(&mut store).unwrap();
        }
        let w = store.get("w").unwrap().data()[0];
        assert!((w - 3.0).abs() < 1e-3, "w = {w}");
    }

    #[test]
    fn rejects_foreign_store() {
        let mut a = ParamStore::new();
        a.insert("w", Tensor::from_vec(vec![0.0])).unwrap();
        let mut b = ParamStore::new();
        b.insert("w", Tensor::from_vec(vec![0.0])).unwrap();
        let mut opt = Adam::new(0.1);
        opt.step(&mut a).unwrap();
        assert!(opt.step(&mut b).is_err());
    }
}
