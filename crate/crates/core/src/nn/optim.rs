use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::autograd::Gradients;
use crate::error::{Error, Result};
use crate::nn::layers::Param;
use crate::tensor::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Clone, Debug)]
struct Moments<T> {
    first: Vec<T>,
    second: Vec<T>,
}

/// Adam with bias correction. Moments are keyed by parameter name; a parameter whose
/// size changed (a grown head) restarts from zero moments.
#[derive(Clone, Debug)]
pub struct Adam<T> {
    pub config: AdamConfig,
    step: u64,
    moments: BTreeMap<String, Moments<T>>,
}

impl<T: Scalar> Adam<T> {
    pub fn new(config: AdamConfig) -> Self {
        Self {
            config,
            step: 0,
            moments: BTreeMap::new(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    pub fn first_moment(&self, name: &str) -> Option<&[T]> {
        self.moments.get(name).map(|m| m.first.as_slice())
    }

    pub fn second_moment(&self, name: &str) -> Option<&[T]> {
        self.moments.get(name).map(|m| m.second.as_slice())
    }

    /// Applies one update to every unfrozen parameter that has a gradient.
    /// Any non-finite gradient aborts the step before anything is modified.
    pub fn step<'p>(
        &mut self,
        params: impl IntoIterator<Item = (String, &'p mut Param<T>)>,
        grads: &Gradients<T>,
    ) -> Result<()> {
        let params: Vec<_> = params.into_iter().filter(|(_, p)| !p.frozen).collect();
        for (name, p) in &params {
            if let Some(g) = grads.get(name) {
                if g.len() != p.value.len() {
                    return Err(Error::Shape(format!(
                        "gradient for `{name}` has {} values, parameter has {}",
                        g.len(),
                        p.value.len()
                    )));
                }
                if !g.is_finite() {
                    return Err(Error::NonFiniteGradient(name.clone()));
                }
            }
        }
        self.step += 1;
        let c = self.config;
        let t = self.step as i32;
        let b1 = T::from_f64_lossy(c.beta1);
        let b2 = T::from_f64_lossy(c.beta2);
        let one = T::one();
        let bc1 = T::from_f64_lossy(1.0 - c.beta1.powi(t));
        let bc2 = T::from_f64_lossy(1.0 - c.beta2.powi(t));
        let lr = T::from_f64_lossy(c.lr);
        let eps = T::from_f64_lossy(c.eps);
        for (name, p) in params {
            let Some(g) = grads.get(&name) else { continue };
            let n = p.value.len();
            let m = self.moments.entry(name).or_insert_with(|| Moments {
                first: vec![T::zero(); n],
                second: vec![T::zero(); n],
            });
            if m.first.len() != n {
                m.first = vec![T::zero(); n];
                m.second = vec![T::zero(); n];
            }
            for (((w, &gv), m1), m2) in p
                .value
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.first.iter_mut())
                .zip(m.second.iter_mut())
            {
                *m1 = b1 * *m1 + (one - b1) * gv;
                *m2 = b2 * *m2 + (one - b2) * gv * gv;
                let mhat = *m1 / bc1;
                let vhat = *m2 / bc2;
                *w -= lr * mhat / (vhat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::layers::Init;
    use crate::tensor::Tensor;

    fn scalar_param(v: f64) -> Param<f64> {
        Param::new(Tensor::new(vec![1], vec![v]).unwrap(), Init::Constant(0.0))
    }

    fn grads(name: &str, v: f64) -> Gradients<f64> {
        let mut g = Gradients::new();
        g.insert(name.into(), Tensor::new(vec![1], vec![v]).unwrap());
        g
    }

    #[test]
    fn first_step_moves_by_lr() {
        let mut p = scalar_param(1.0);
        let mut adam = Adam::new(AdamConfig {
            lr: 0.1,
            ..AdamConfig::default()
        });
        adam.step(vec![("w".to_string(), &mut p)], &grads("w", 1.0)).unwrap();
        // m̂ = 1, v̂ = 1 → Δ = lr / (1 + ε)
        let expect = 1.0 - 0.1 / (1.0 + 1e-8);
        assert!((p.value.data()[0] - expect).abs() < 1e-15);
        assert!((p.value.data()[0] - 0.9).abs() < 1e-8);
        assert_eq!(adam.steps(), 1);
    }

    #[test]
    fn zero_gradient_from_fresh_state_is_a_no_op() {
        let mut p = scalar_param(0.7);
        let mut adam = Adam::new(AdamConfig::default());
        adam.step(vec![("w".to_string(), &mut p)], &grads("w", 0.0)).unwrap();
        assert_eq!(p.value.data()[0], 0.7);
        assert_eq!(adam.first_moment("w").unwrap()[0], 0.0);
    }

    #[test]
    fn zero_gradient_decays_moments() {
        let mut p = scalar_param(0.7);
        let mut adam = Adam::new(AdamConfig::default());
        adam.step(vec![("w".to_string(), &mut p)], &grads("w", 2.0)).unwrap();
        let (m1, m2) = (adam.first_moment("w").unwrap()[0], adam.second_moment("w").unwrap()[0]);
        adam.step(vec![("w".to_string(), &mut p)], &grads("w", 0.0)).unwrap();
        assert!((adam.first_moment("w").unwrap()[0] - 0.9 * m1).abs() < 1e-15);
        assert!((adam.second_moment("w").unwrap()[0] - 0.999 * m2).abs() < 1e-15);
    }

    #[test]
    fn default_learning_rate() {
        assert_eq!(AdamConfig::default().lr, 1e-4);
        let parsed: AdamConfig = serde_json::from_str("{}").unwrap();
        assert_eq!(parsed.lr, 1e-4);
    }

    #[test]
    fn frozen_params_are_untouched() {
        let mut p = scalar_param(1.0);
        p.frozen = true;
        let mut adam = Adam::new(AdamConfig::default());
        adam.step(vec![("w".to_string(), &mut p)], &grads("w", 1.0)).unwrap();
        assert_eq!(p.value.data()[0].to_bits(), 1.0f64.to_bits());
    }

    #[test]
    fn nan_gradient_aborts_step() {
        let mut p = scalar_param(1.0);
        let mut q = scalar_param(2.0);
        let mut g = grads("a", 1.0);
        g.insert("b".into(), Tensor::new(vec![1], vec![f64::NAN]).unwrap());
        let mut adam = Adam::new(AdamConfig::default());
        let err = adam
            .step(vec![("a".to_string(), &mut p), ("b".to_string(), &mut q)], &g)
            .unwrap_err();
        assert!(matches!(err, Error::NonFiniteGradient(ref n) if n == "b"));
        assert_eq!(p.value.data()[0], 1.0);
        assert_eq!(adam.steps(), 0);
    }
}
