//! Adam with bias correction.

use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { lr: 5e-5, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

#[derive(Clone, Debug)]
pub struct Adam<T> {
    pub config: AdamConfig,
    pub step: u64,
    first: Vec<Option<Tensor<T>>>,
    second: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Adam<T> {
    pub fn new(config: AdamConfig) -> Self {
        Self { config, step: 0, first: Vec::new(), second: Vec::new() }
    }

    /// Applies one update to every trainable parameter that has a gradient.
    /// Nothing is modified if any gradient is non-finite.
    pub fn step(&mut self, store: &mut ParamStore<T>, grads: &[Option<Tensor<T>>]) -> Result<()> {
        if grads.len() != store.len() {
            return Err(Error::shape("adam", format!("{} gradients for {} parameters", grads.len(), store.len())));
        }
        for (id, g) in store.ids().zip(grads) {
            if let Some(g) = g {
                if !g.is_finite() {
                    return Err(Error::NonFinite(format!("gradient of parameter {}", store.entry(id).name)));
                }
                if g.shape() != store.get(id).shape() {
                    return Err(Error::shape("adam", format!("gradient shape for {}", store.entry(id).name)));
                }
            }
        }
        self.first.resize(store.len(), None);
        self.second.resize(store.len(), None);
        self.step += 1;
        let c = &self.config;
        let (b1, b2) = (T::of(c.beta1), T::of(c.beta2));
        let bc1 = T::of(1.0 - c.beta1.powi(self.step as i32));
        let bc2 = T::of(1.0 - c.beta2.powi(self.step as i32));
        let (lr, eps) = (T::of(c.lr), T::of(c.eps));
        let ids: Vec<_> = store.ids().collect();
        for id in ids {
            let Some(g) = &grads[id.0] else { continue };
            if !store.is_trainable(id) {
                continue;
            }
            let m = self.first[id.0].get_or_insert_with(|| Tensor::zeros(g.shape()));
            let v = self.second[id.0].get_or_insert_with(|| Tensor::zeros(g.shape()));
            let p = store.get_mut(id);
            for (((pi, &gi), mi), vi) in p.data_mut().iter_mut().zip(g.data()).zip(m.data_mut()).zip(v.data_mut()) {
                *mi = b1 * *mi + (T::one() - b1) * gi;
                *vi = b2 * *vi + (T::one() - b2) * gi * gi;
                let mhat = *mi / bc1;
                let vhat = *vi / bc2;
                *pi -= lr * mhat / (vhat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store() -> ParamStore<f64> {
        let mut s = ParamStore::new();
        s.add("a", Tensor::from_f64(1, 3, &[1.0, -2.0, 0.5]).unwrap());
        s.add("b", Tensor::from_f64(1, 1, &[4.0]).unwrap());
        s
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        let mut s = store();
        let mut adam = Adam::new(AdamConfig { lr: 0.01, ..AdamConfig::default() });
        let g = vec![Some(Tensor::from_f64(1, 3, &[3.0, -0.2, 1e-3]).unwrap()), None];
        adam.step(&mut s, &g).unwrap();
        let a = s.get(crate::params::ParamId(0)).data();
        assert!((a[0] - (1.0 - 0.01)).abs() < 1e-8);
        assert!((a[1] - (-2.0 + 0.01)).abs() < 1e-8);
        assert!((a[2] - (0.5 - 0.01)).abs() < 1e-6);
        assert_eq!(s.get(crate::params::ParamId(1)).data(), &[4.0]);
    }

    #[test]
    fn zero_gradient_leaves_parameters() {
        let mut s = store();
        let before = s.clone();
        let mut adam = Adam::new(AdamConfig::default());
        let g = vec![Some(Tensor::zeros(&[1, 3])), Some(Tensor::zeros(&[1, 1]))];
        adam.step(&mut s, &g).unwrap();
        for id in s.ids() {
            assert_eq!(s.get(id), before.get(id));
        }
    }

    #[test]
    fn non_finite_gradient_names_parameter() {
        let mut s = store();
        let mut adam = Adam::new(AdamConfig::default());
        let g = vec![None, Some(Tensor::from_f64(1, 1, &[f64::NAN]).unwrap())];
        let err = adam.step(&mut s, &g).unwrap_err().to_string();
        assert!(err.contains('b'), "{err}");
        assert_eq!(s.get(crate::params::ParamId(1)).data(), &[4.0]);
    }

    #[test]
    fn frozen_parameters_are_skipped() {
        let mut s = store();
        s.set_trainable(crate::params::ParamId(0), false);
        let mut adam = Adam::new(AdamConfig::default());
        let g = vec![Some(Tensor::full(&[1, 3], 1.0)), None];
        adam.step(&mut s, &g).unwrap();
        assert_eq!(s.get(crate::params::ParamId(0)).data(), &[1.0, -2.0, 0.5]);
    }
}
