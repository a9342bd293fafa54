//! AdamW with decoupled weight decay, and global-norm gradient clipping.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use taxa_numeric::{ParamStore, Scalar, Tensor};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum OptimError {
    #[error("non-finite gradient in parameter {0}")]
    NonFiniteGradient(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig { beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 0.01 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Moments<T> {
    pub m: Tensor<T>,
    pub v: Tensor<T>,
    pub step: u64,
}

/// Optimizer state keyed by parameter name. Moments are only kept for
/// parameters that currently receive gradients.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamW<T> {
    pub config: AdamWConfig,
    pub state: BTreeMap<String, Moments<T>>,
}

impl<T: Scalar> AdamW<T> {
    pub fn new(config: AdamWConfig) -> Self {
        AdamW { config, state: BTreeMap::new() }
    }

    /// One update of every trainable, non-frozen parameter from its
    /// accumulated gradient. Nothing is modified if any gradient is
    /// non-finite.
    pub fn step(&mut self, store: &mut ParamStore<T>, lr: f64) -> Result<(), OptimError> {
        for (_, p) in store.iter() {
            if p.requires_grad() && !p.grad.is_finite() {
                return Err(OptimError::NonFiniteGradient(p.name.clone()));
            }
        }
        let c = self.config;
        let (b1, b2) = (T::lit(c.beta1), T::lit(c.beta2));
        let (one_b1, one_b2) = (T::lit(1.0 - c.beta1), T::lit(1.0 - c.beta2));
        let decay = T::lit(1.0 - lr * c.weight_decay);
        let eps = T::lit(c.eps);
        for (_, p) in store.iter_mut() {
            if !p.requires_grad() {
                continue;
            }
            let st = self.state.entry(p.name.clone()).or_insert_with(|| Moments {
                m: Tensor::zeros(p.value.shape()),
                v: Tensor::zeros(p.value.shape()),
                step: 0,
            });
            st.step += 1;
            let bc1 = T::lit(1.0 - c.beta1.powi(st.step as i32));
            let bc2 = T::lit(1.0 - c.beta2.powi(st.step as i32));
            let lr_t = T::lit(lr);
            let g = p.grad.data();
            let m = st.m.data_mut();
            let v = st.v.data_mut();
            for (i, w) in p.value.data_mut().iter_mut().enumerate() {
                m[i] = b1 * m[i] + one_b1 * g[i];
                v[i] = b2 * v[i] + one_b2 * g[i] * g[i];
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                *w = *w * decay - lr_t * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }

    /// Drops moments of parameters that no longer receive gradients.
    pub fn retain_active(&mut self, store: &ParamStore<T>) {
        self.state.retain(|name, _| store.by_name(name).is_some_and(|p| p.requires_grad()));
    }
}

/// Scales all active gradients so their joint L2 norm is at most
/// `max_norm`. Returns the norm before clipping.
pub fn clip_global_norm<T: Scalar>(store: &mut ParamStore<T>, max_norm: f64) -> f64 {
    let total: f64 = store
        .iter()
        .filter(|(_, p)| p.requires_grad())
        .map(|(_, p)| p.grad.data().iter().map(|g| g.to_f64().unwrap_or(f64::NAN).powi(2)).sum::<f64>())
        .sum();
    let norm = total.sqrt();
    if norm > max_norm && norm.is_finite() {
        let s = T::lit(max_norm / norm);
        for (_, p) in store.iter_mut() {
            if p.requires_grad() {
                p.grad.scale_assign(s);
            }
        }
    }
    norm
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_store(value: f64, grad: f64) -> ParamStore<f64> {
        let mut s = ParamStore::new();
        let id = s.insert("p", Tensor::scalar(value)).unwrap();
        s.get_mut(id).grad = Tensor::scalar(grad);
        s
    }

    #[test]
    fn zero_grad_without_decay_leaves_parameter() {
        let mut s = scalar_store(1.25, 0.0);
        let mut opt = AdamW::new(AdamWConfig { weight_decay: 0.0, ..AdamWConfig::default() });
        opt.step(&mut s, 0.1).unwrap();
        assert_eq!(s.by_name("p").unwrap().value.item(), 1.25);
    }

    #[test]
    fn two_steps_match_decimal_reference() {
        let mut s = scalar_store(1.0, 1.0);
        let mut opt = AdamW::new(AdamWConfig::default());
        opt.step(&mut s, 0.1).unwrap();
        let p = s.by_name("p").unwrap().value.item();
        assert!((p - 0.899_000_001).abs() < 1e-15, "{p}");
        let id = s.id("p").unwrap();
        s.get_mut(id).grad = Tensor::scalar(-2.0);
        opt.step(&mut s, 0.1).unwrap();
        let p = s.get(id).value.item();
        assert!((p - 0.934_711_353_471_075_1).abs() < 1e-14, "{p}");
        assert_eq!(opt.state["p"].step, 2);
    }

    #[test]
    fn frozen_parameter_is_untouched() {
        let mut s = scalar_store(1.0, 5.0);
        let id = s.id("p").unwrap();
        s.get_mut(id).frozen = true;
        s.get_mut(id).grad = Tensor::scalar(5.0);
        let mut opt = AdamW::new(AdamWConfig::default());
        opt.step(&mut s, 0.1).unwrap();
        assert_eq!(s.get(id).value.item(), 1.0);
        assert!(opt.state.is_empty());
    }

    #[test]
    fn non_finite_gradient_names_parameter() {
        let mut s = scalar_store(1.0, f64::NAN);
        let mut opt = AdamW::new(AdamWConfig::default());
        assert_eq!(opt.step(&mut s, 0.1), Err(OptimError::NonFiniteGradient("p".into())));
        assert_eq!(s.by_name("p").unwrap().value.item(), 1.0);
    }

    #[test]
    fn clip_scales_to_max_norm() {
        let mut s = ParamStore::<f64>::new();
        let a = s.insert("a", Tensor::zeros(&[2])).unwrap();
        s.get_mut(a).grad = Tensor::from_f64(&[2], &[3.0, 4.0]).unwrap();
        assert_eq!(clip_global_norm(&mut s, 1.0), 5.0);
        let g = s.get(a).grad.data();
        assert!((g[0] - 0.6).abs() < 1e-15 && (g[1] - 0.8).abs() < 1e-15);
        assert!((clip_global_norm(&mut s, 1.0) - 1.0).abs() < 1e-15);
    }
}
