//! Named parameter storage and Adam/AdamW updates.

use super::tensor::Tensor;
use crate::error::{Error, Result};
use std::collections::BTreeMap;

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimKind {
    Adam,
    AdamW,
}

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct OptimizerConfig {
    pub kind: OptimKind,
    pub learning_rate: f32,
    pub weight_decay: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub epsilon: f32,
    /// Global-norm clip; off unless set.
    pub grad_clip: Option<f32>,
}

impl OptimizerConfig {
    pub fn adam(learning_rate: f32) -> Self {
        Self {
            kind: OptimKind::Adam,
            learning_rate,
            weight_decay: 0.0,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            grad_clip: None,
        }
    }

    pub fn adamw(learning_rate: f32, weight_decay: f32) -> Self {
        Self {
            kind: OptimKind::AdamW,
            learning_rate,
            weight_decay,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            grad_clip: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0) {
            return Err(Error::Config("learning_rate must be > 0".into()));
        }
        if self.weight_decay < 0.0 {
            return Err(Error::Config("weight_decay must be >= 0".into()));
        }
        if !(0.0 < self.beta1 && self.beta1 < self.beta2 && self.beta2 < 1.0) {
            return Err(Error::Config("need 0 < beta1 < beta2 < 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct ParamEntry {
    pub value: Tensor,
    pub grad: Tensor,
    pub m1: Tensor,
    pub m2: Tensor,
}

/// Named tensors plus optimizer moments; the checkpoint unit.
/// BTreeMap keeps iteration (and hence every update and checksum) ordered.
#[derive(Debug, Clone, Default)]
pub struct ParameterStore {
    entries: BTreeMap<String, ParamEntry>,
    step_count: u64,
}

impl ParameterStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: &str, value: Tensor) {
        let shape = value.shape.clone();
        self.entries.insert(
            name.to_string(),
            ParamEntry {
                value,
                grad: Tensor::zeros(shape.clone()),
                m1: Tensor::zeros(shape.clone()),
                m2: Tensor::zeros(shape),
            },
        );
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn value(&self, name: &str) -> &Tensor {
        &self.entries.get(name).unwrap_or_else(|| panic!("unknown parameter {name}")).value
    }

    pub fn value_mut(&mut self, name: &str) -> &mut Tensor {
        &mut self
            .entries
            .get_mut(name)
            .unwrap_or_else(|| panic!("unknown parameter {name}"))
            .value
    }

    pub fn grad(&self, name: &str) -> &Tensor {
        &self.entries.get(name).unwrap_or_else(|| panic!("unknown parameter {name}")).grad
    }

    pub fn add_to_grad(&mut self, name: &str, g: &Tensor, scale: f32) {
        let e = self
            .entries
            .get_mut(name)
            .unwrap_or_else(|| panic!("unknown parameter {name}"));
        debug_assert_eq!(e.grad.shape, g.shape, "grad shape for {name}");
        for (d, s) in e.grad.data.iter_mut().zip(&g.data) {
            *d += scale * s;
        }
    }

    pub fn zero_grads(&mut self) {
        for e in self.entries.values_mut() {
            e.grad.data.fill(0.0);
        }
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(|s| s.as_str())
    }

    pub fn entries(&self) -> impl Iterator<Item = (&str, &ParamEntry)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn entry_mut(&mut self, name: &str) -> &mut ParamEntry {
        self.entries
            .get_mut(name)
            .unwrap_or_else(|| panic!("unknown parameter {name}"))
    }

    pub fn step_count(&self) -> u64 {
        self.step_count
    }

    pub fn set_step_count(&mut self, n: u64) {
        self.step_count = n;
    }

    pub fn num_values(&self) -> usize {
        self.entries.values().map(|e| e.value.len()).sum()
    }

    /// FNV-1a over value bytes in name order; detects any parameter mutation.
    pub fn checksum(&self) -> u64 {
        let mut h: u64 = 0xcbf29ce484222325;
        for (name, e) in &self.entries {
            for b in name.as_bytes() {
                h ^= *b as u64;
                h = h.wrapping_mul(0x100000001b3);
            }
            for v in &e.value.data {
                for b in v.to_le_bytes() {
                    h ^= b as u64;
                    h = h.wrapping_mul(0x100000001b3);
                }
            }
        }
        h
    }
}

/// One Adam/AdamW step over every entry; clears gradients afterwards.
pub fn optimizer_step(store: &mut ParameterStore, config: &OptimizerConfig) -> Result<()> {
    config.validate()?;
    for (name, e) in &store.entries {
        if !e.grad.is_finite() {
            return Err(Error::NonFinite(format!("gradient of parameter {name}")));
        }
    }

    let clip_scale = match config.grad_clip {
        Some(max_norm) => {
            let sq: f64 = store
                .entries
                .values()
                .flat_map(|e| e.grad.data.iter())
                .map(|g| (*g as f64) * (*g as f64))
                .sum();
            let norm = sq.sqrt() as f32;
            if norm > max_norm {
                max_norm / norm
            } else {
                1.0
            }
        }
        None => 1.0,
    };

    store.step_count += 1;
    let t = store.step_count as f32;
    let bc1 = 1.0 - config.beta1.powf(t);
    let bc2 = 1.0 - config.beta2.powf(t);

    for e in store.entries.values_mut() {
        for i in 0..e.value.data.len() {
            let mut g = e.grad.data[i] * clip_scale;
            match config.kind {
                OptimKind::AdamW => {
                    // decoupled decay applied to the value before the moment term
                    e.value.data[i] *= 1.0 - config.learning_rate * config.weight_decay;
                }
                OptimKind::Adam => {
                    g += config.weight_decay * e.value.data[i];
                }
            }
            e.m1.data[i] = config.beta1 * e.m1.data[i] + (1.0 - config.beta1) * g;
            e.m2.data[i] = config.beta2 * e.m2.data[i] + (1.0 - config.beta2) * g * g;
            let m_hat = e.m1.data[i] / bc1;
            let v_hat = e.m2.data[i] / bc2;
            e.value.data[i] -= config.learning_rate * m_hat / (v_hat.sqrt() + config.epsilon);
        }
        e.grad.data.fill(0.0);
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_grad_zero_decay_is_identity() {
        let mut store = ParameterStore::new();
        store.insert("w", Tensor::new(vec![3], vec![1.0, -2.0, 0.5]));
        let before = store.value("w").clone();
        optimizer_step(&mut store, &OptimizerConfig::adamw(1e-3, 0.0)).unwrap();
        assert_eq!(store.value("w").data, before.data);
        assert_eq!(store.step_count(), 1);
    }

    #[test]
    fn adam_first_step_is_bias_corrected() {
        let mut store = ParameterStore::new();
        store.insert("x", Tensor::new(vec![1], vec![0.0]));
        store.add_to_grad("x", &Tensor::new(vec![1], vec![1.0]), 1.0);
        let cfg = OptimizerConfig::adam(0.1);
        optimizer_step(&mut store, &cfg).unwrap();
        // m̂ = v̂ = 1 at step 1, so the update is −lr/(1+ε) ≈ −0.1
        assert!((store.value("x").data[0] + 0.1).abs() < 1e-5);
    }

    #[test]
    fn step_count_increments_once_per_step() {
        let mut store = ParameterStore::new();
        store.insert("x", Tensor::zeros(vec![2]));
        for expected in 1..=3 {
            optimizer_step(&mut store, &OptimizerConfig::adam(1e-3)).unwrap();
            assert_eq!(store.step_count(), expected);
        }
    }

    #[test]
    fn nan_gradient_names_the_parameter() {
        let mut store = ParameterStore::new();
        store.insert("layer.weight", Tensor::zeros(vec![1]));
        store.add_to_grad("layer.weight", &Tensor::new(vec![1], vec![f32::NAN]), 1.0);
        let err = optimizer_step(&mut store, &OptimizerConfig::adam(1e-3)).unwrap_err();
        assert!(err.to_string().contains("layer.weight"), "{err}");
    }

    #[test]
    fn adamw_decays_values() {
        let mut store = ParameterStore::new();
        store.insert("w", Tensor::new(vec![1], vec![10.0]));
        let cfg = OptimizerConfig::adamw(0.1, 0.5);
        optimizer_step(&mut store, &cfg).unwrap();
        // zero gradient, so only the decay factor applies
        assert!((store.value("w").data[0] - 10.0 * (1.0 - 0.1 * 0.5)).abs() < 1e-6);
    }

    #[test]
    fn invalid_config_rejected() {
        let mut bad = OptimizerConfig::adam(1e-3);
        bad.beta1 = 0.999;
        bad.beta2 = 0.9;
        assert!(bad.validate().is_err());
    }
}
