//! Named parameters and the AdamW optimizer with global-norm clipping.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Result, TensorError};
use crate::graph::{Gradients, Graph, Var};
use crate::tensor::{Scalar, Tensor};

#[derive(Debug, Clone, PartialEq)]
pub struct Parameter<T> {
    pub tensor: Tensor<T>,
    pub frozen: bool,
}

/// Name-ordered parameter collection.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamStore<T> {
    params: BTreeMap<String, Parameter<T>>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore { params: BTreeMap::new() }
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor<T>, frozen: bool) {
        self.params.insert(name.into(), Parameter { tensor, frozen });
    }

    pub fn get(&self, name: &str) -> Option<&Parameter<T>> {
        self.params.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Parameter<T>> {
        self.params.get_mut(name)
    }

    pub fn tensor(&self, name: &str) -> Result<&Tensor<T>> {
        self.params
            .get(name)
            .map(|p| &p.tensor)
            .ok_or_else(|| TensorError::config("ParamStore", format!("missing parameter `{name}`")))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.params.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Parameter<T>)> {
        self.params.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Total scalar count.
    pub fn numel(&self) -> usize {
        self.params.values().map(|p| p.tensor.numel()).sum()
    }

    pub fn freeze_all(&mut self) {
        self.params.values_mut().for_each(|p| p.frozen = true);
    }

    pub fn merge(&mut self, other: ParamStore<T>) {
        self.params.extend(other.params);
    }

    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        ParamStore {
            params: self
                .params
                .iter()
                .map(|(k, p)| (k.clone(), Parameter { tensor: p.tensor.cast(), frozen: p.frozen }))
                .collect(),
        }
    }

    /// Registers every parameter as a graph leaf.
    ///
    /// With `trainable` set, non-frozen parameters require gradients.
    pub fn bind(&self, graph: &mut Graph<T>, trainable: bool) -> Bindings {
        Bindings {
            vars: self
                .params
                .iter()
                .map(|(k, p)| (k.clone(), graph.leaf(p.tensor.clone(), trainable && !p.frozen)))
                .collect(),
        }
    }

    /// Collects gradients for the non-frozen parameters of a bound graph.
    pub fn collect_grads(&self, bindings: &Bindings, grads: &mut Gradients<T>) -> BTreeMap<String, Tensor<T>> {
        self.params
            .iter()
            .filter(|(_, p)| !p.frozen)
            .filter_map(|(k, _)| {
                let v = bindings.vars.get(k)?;
                grads.take(*v).map(|g| (k.clone(), g))
            })
            .collect()
    }
}

/// Map from parameter name to its leaf on one graph.
#[derive(Debug, Clone, Default)]
pub struct Bindings {
    vars: BTreeMap<String, Var>,
}

impl FromIterator<(String, Var)> for Bindings {
    fn from_iter<I: IntoIterator<Item = (String, Var)>>(iter: I) -> Self {
        Bindings { vars: iter.into_iter().collect() }
    }
}

impl Bindings {
    pub fn var(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| TensorError::config("Bindings", format!("unbound parameter `{name}`")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Global gradient norm ceiling; `None` disables clipping.
    pub clip_norm: Option<f64>,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig {
            learning_rate: 5e-5,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
            clip_norm: Some(1.0),
        }
    }
}

#[derive(Debug, Clone)]
struct Moments<T> {
    first: Vec<T>,
    second: Vec<T>,
}

#[derive(Debug, Clone)]
pub struct OptimizerState<T> {
    pub config: AdamWConfig,
    step: u64,
    moments: BTreeMap<String, Moments<T>>,
}

/// What one optimizer step did.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepInfo {
    pub grad_norm: f64,
    pub clipped: bool,
}

impl<T: Scalar> OptimizerState<T> {
    pub fn new(config: AdamWConfig) -> Self {
        OptimizerState { config, step: 0, moments: BTreeMap::new() }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn has_moments(&self, name: &str) -> bool {
        self.moments.contains_key(name)
    }

    /// One AdamW update of every non-frozen parameter.
    ///
    /// Gradients are clipped to the configured global norm before the
    /// moment update. Frozen parameters are never touched.
    pub fn adamw_step(
        &mut self,
        params: &mut ParamStore<T>,
        grads: &BTreeMap<String, Tensor<T>>,
    ) -> Result<StepInfo> {
        for (name, p) in params.iter() {
            if p.frozen {
                continue;
            }
            match grads.get(name) {
                None => {
                    return Err(TensorError::Training(format!("missing gradient for trainable `{name}`")))
                }
                Some(g) if g.shape() != p.tensor.shape() => {
                    return Err(TensorError::Training(format!(
                        "gradient shape {:?} for `{name}` differs from parameter {:?}",
                        g.shape(),
                        p.tensor.shape()
                    )))
                }
                Some(g) if !g.is_finite() => {
                    return Err(TensorError::Training(format!("non-finite gradient for `{name}`")))
                }
                _ => {}
            }
        }

        let sq: f64 = params
            .iter()
            .filter(|(_, p)| !p.frozen)
            .map(|(name, _)| grads[name].data().iter().map(|v| v.as_f64() * v.as_f64()).sum::<f64>())
            .sum();
        let grad_norm = sq.sqrt();
        let mut coef = 1.0;
        if let Some(max) = self.config.clip_norm {
            let c = max / (grad_norm + 1e-6);
            if c < 1.0 {
                coef = c;
            }
        }

        self.step += 1;
        let c = self.config;
        let t = self.step as i32;
        let bc1 = 1.0 - c.beta1.powi(t);
        let bc2 = 1.0 - c.beta2.powi(t);
        let (b1, b2) = (T::of_f64(c.beta1), T::of_f64(c.beta2));
        let (one, lr, eps) = (T::one(), T::of_f64(c.learning_rate), T::of_f64(c.eps));
        let decay = T::of_f64(1.0 - c.learning_rate * c.weight_decay);
        let coef_t = T::of_f64(coef);
        let (bc1, bc2) = (T::of_f64(bc1), T::of_f64(bc2));

        for (name, p) in params.params.iter_mut() {
            if p.frozen {
                continue;
            }
            let g = grads[name].data();
            let m = self.moments.entry(name.clone()).or_insert_with(|| Moments {
                first: vec![T::zero(); g.len()],
                second: vec![T::zero(); g.len()],
            });
            for (((w, &gi), mi), vi) in p
                .tensor
                .data_mut()
                .iter_mut()
                .zip(g)
                .zip(m.first.iter_mut())
                .zip(m.second.iter_mut())
            {
                let gi = gi * coef_t;
                *mi = b1 * *mi + (one - b1) * gi;
                *vi = b2 * *vi + (one - b2) * gi * gi;
                let m_hat = *mi / bc1;
                let v_hat = *vi / bc2;
                *w = *w * decay;
                *w = *w - lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(StepInfo { grad_norm, clipped: coef < 1.0 })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_store(w: f64, frozen: bool) -> ParamStore<f64> {
        let mut s = ParamStore::new();
        s.insert("w", Tensor::full(&[1], w), frozen);
        s
    }

    fn grads(g: f64) -> BTreeMap<String, Tensor<f64>> {
        BTreeMap::from([("w".to_string(), Tensor::full(&[1], g))])
    }

    #[test]
    fn zero_gradient_without_decay_is_noop() {
        let mut store = scalar_store(0.7, false);
        let cfg = AdamWConfig { weight_decay: 0.0, ..AdamWConfig::default() };
        let mut opt = OptimizerState::new(cfg);
        for _ in 0..5 {
            opt.adamw_step(&mut store, &grads(0.0)).unwrap();
        }
        assert_eq!(store.tensor("w").unwrap().data(), &[0.7]);
    }

    /// Hand-rolled single-step AdamW on a scalar, written out separately
    /// from the vectorised implementation above.
    fn reference_adamw_one_step(w: f64, g: f64, lr: f64, wd: f64) -> f64 {
        let (beta1, beta2, eps) = (0.9f64, 0.999f64, 1e-8f64);
        let m = (1.0 - beta1) * g;
        let v = (1.0 - beta2) * g * g;
        let m_hat = m / (1.0 - beta1);
        let v_hat = v / (1.0 - beta2);
        let decayed = w - lr * wd * w;
        decayed - lr * m_hat / (v_hat.sqrt() + eps)
    }

    #[test]
    fn scalar_step_matches_reference() {
        let mut store = scalar_store(1.0, false);
        let cfg = AdamWConfig { learning_rate: 0.1, clip_norm: None, ..AdamWConfig::default() };
        let mut opt = OptimizerState::new(cfg);
        opt.adamw_step(&mut store, &grads(1.0)).unwrap();
        let expected = reference_adamw_one_step(1.0, 1.0, 0.1, 0.01);
        // 1 - 0.001 - 0.1 * 1/(1+1e-8)
        assert!((expected - 0.899).abs() < 1e-8);
        assert!((store.tensor("w").unwrap().data()[0] - expected).abs() < 1e-15);
    }

    #[test]
    fn frozen_parameter_is_bit_identical() {
        let mut store = scalar_store(0.123456789, true);
        let before = store.clone();
        let mut opt = OptimizerState::new(AdamWConfig::default());
        for _ in 0..10 {
            opt.adamw_step(&mut store, &grads(3.0)).unwrap();
        }
        assert!(store.tensor("w").unwrap().bit_eq(before.tensor("w").unwrap()));
        assert!(!opt.has_moments("w"));
    }

    #[test]
    fn missing_gradient_is_training_error() {
        let mut store = scalar_store(1.0, false);
        let mut opt = OptimizerState::new(AdamWConfig::default());
        let err = opt.adamw_step(&mut store, &BTreeMap::new()).unwrap_err();
        assert!(matches!(err, TensorError::Training(_)));
    }

    #[test]
    fn clipping_bounds_the_global_norm() {
        let mut store = ParamStore::<f64>::new();
        store.insert("a", Tensor::full(&[1], 0.0), false);
        store.insert("b", Tensor::full(&[1], 0.0), false);
        let g = BTreeMap::from([
            ("a".to_string(), Tensor::full(&[1], 3.0)),
            ("b".to_string(), Tensor::full(&[1], 4.0)),
        ]);
        let mut opt = OptimizerState::new(AdamWConfig { clip_norm: Some(1.0), ..AdamWConfig::default() });
        let info = opt.adamw_step(&mut store, &g).unwrap();
        assert!((info.grad_norm - 5.0).abs() < 1e-12);
        assert!(info.clipped);
        // first moment after clipping: 0.1 * 3/5
        assert!((opt.moments["a"].first[0] - 0.1 * 3.0 / (5.0 + 1e-6)).abs() < 1e-12);
    }
}
