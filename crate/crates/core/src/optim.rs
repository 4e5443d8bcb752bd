//! Adam with bias correction, state kept by parameter name.

use std::collections::BTreeMap;

use crate::autograd::Array;
use crate::error::{Error, Result};
use crate::params::ParamStore;

#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    pub first_moment: ParamStore,
    pub second_moment: ParamStore,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            first_moment: ParamStore::new(),
            second_moment: ParamStore::new(),
        }
    }

    /// Apply one update to every parameter of `params` that has a gradient.
    /// Non-finite gradients abort the step without touching any weight.
    pub fn step(&mut self, params: &mut ParamStore, grads: &BTreeMap<String, Array>) -> Result<()> {
        for (name, g) in grads {
            if g.iter().any(|v| !v.is_finite()) {
                return Err(Error::Divergence(format!("non-finite gradient for `{name}`")));
            }
        }
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        for (name, g) in grads {
            let Some(p) = params.get_mut(name) else {
                continue;
            };
            if self.first_moment.get(name).is_none() {
                self.first_moment.insert(name.clone(), Array::zeros(g.raw_dim()));
                self.second_moment.insert(name.clone(), Array::zeros(g.raw_dim()));
            }
            let m = self.first_moment.get_mut(name).unwrap();
            m.zip_mut_with(g, |m, &g| *m = self.beta1 * *m + (1.0 - self.beta1) * g);
            let v = self.second_moment.get_mut(name).unwrap();
            v.zip_mut_with(g, |v, &g| *v = self.beta2 * *v + (1.0 - self.beta2) * g * g);
            let m = self.first_moment.get(name).unwrap();
            let v = self.second_moment.get(name).unwrap();
            ndarray::Zip::from(p).and(&**m).and(&**v).for_each(|p, &m, &v| {
                *p -= self.lr * (m / bc1) / ((v / bc2).sqrt() + self.eps);
            });
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::IxDyn;

    #[test]
    fn first_step_moves_by_learning_rate() {
        let mut params = ParamStore::new();
        params.insert("w", Array::from_elem(IxDyn(&[2]), 1.0));
        let mut grads = BTreeMap::new();
        grads.insert("w".to_string(), Array::from_shape_vec(IxDyn(&[2]), vec![3.0, -0.5]).unwrap());
        let mut adam = Adam::new(0.1);
        adam.step(&mut params, &grads).unwrap();
        let w = params.get("w").unwrap();
        assert!((w[[0]] - 0.9).abs() < 1e-6);
        assert!((w[[1]] - 1.1).abs() < 1e-6);
    }

    #[test]
    fn nan_gradient_is_rejected() {
        let mut params = ParamStore::new();
        params.insert("w", Array::zeros(IxDyn(&[1])));
        let mut grads = BTreeMap::new();
        grads.insert("w".to_string(), Array::from_elem(IxDyn(&[1]), f64::NAN));
        let mut adam = Adam::new(0.1);
        assert!(matches!(adam.step(&mut params, &grads), Err(Error::Divergence(_))));
        assert_eq!(adam.step, 0);
    }
}
