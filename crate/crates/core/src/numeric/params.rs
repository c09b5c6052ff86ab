use std::collections::BTreeMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::rng::RngStream;
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Cosine decay from `lr` at step 0 to `lr * final_fraction` at `steps`.
pub fn cosine_lr(lr: f64, final_fraction: f64, step: usize, steps: usize) -> f64 {
    let progress = (step as f64 / steps.max(1) as f64).min(1.0);
    let cos = 0.5 * (1.0 + (std::f64::consts::PI * progress).cos());
    lr * (final_fraction + (1.0 - final_fraction) * cos)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Global gradient-norm clip; `None` disables clipping.
    pub clip_norm: Option<f64>,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            clip_norm: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
struct Slot {
    value: Tensor,
    m: Tensor,
    v: Tensor,
    step: u64,
}

/// Named parameters with per-parameter Adam moments. Iteration order is the
/// lexicographic order of names.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParameterStore {
    slots: BTreeMap<String, Slot>,
}

impl ParameterStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) {
        let shape = value.shape().to_vec();
        self.slots.insert(
            name.into(),
            Slot {
                value,
                m: Tensor::zeros(&shape),
                v: Tensor::zeros(&shape),
                step: 0,
            },
        );
    }

    /// Uniform in ±sqrt(6/(fan_in+fan_out)).
    pub fn insert_xavier(
        &mut self,
        name: impl Into<String>,
        shape: &[usize],
        fan_in: usize,
        fan_out: usize,
        rng: &mut RngStream,
    ) {
        let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| rng.gen_range(-bound..=bound)).collect();
        self.insert(name, Tensor::from_parts(shape.to_vec(), data));
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.slots.get(name).map(|s| &s.value)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.slots.get_mut(name).map(|s| &mut s.value)
    }

    pub fn step_count(&self, name: &str) -> Option<u64> {
        self.slots.get(name).map(|s| s.step)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.slots.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.slots.iter().map(|(k, s)| (k.as_str(), &s.value))
    }

    pub fn len(&self) -> usize {
        self.slots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slots.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.slots.values().map(|s| s.value.numel()).sum()
    }

    /// Values only; optimiser state is dropped.
    pub fn to_map(&self) -> BTreeMap<String, Tensor> {
        self.slots.iter().map(|(k, s)| (k.clone(), s.value.clone())).collect()
    }

    pub fn from_map(map: BTreeMap<String, Tensor>) -> Self {
        let mut store = Self::new();
        for (k, v) in map {
            store.insert(k, v);
        }
        store
    }

    /// One bias-corrected Adam update. Validation happens before any parameter
    /// is touched, so a rejected step leaves the store unchanged.
    pub fn adam_step(&mut self, grads: &BTreeMap<String, Tensor>, cfg: &AdamConfig) -> Result<()> {
        let mut sq = 0.0;
        for (name, g) in grads {
            let slot = self
                .slots
                .get(name)
                .ok_or_else(|| Error::Usage(format!("gradient for unknown parameter `{name}`")))?;
            if g.shape() != slot.value.shape() {
                return Err(Error::dim("adam_step", slot.value.shape(), g.shape()));
            }
            if !g.is_finite() {
                return Err(Error::Training {
                    step: slot.step as usize,
                    reason: format!("non-finite gradient for `{name}`"),
                });
            }
            sq += g.data().iter().map(|v| v * v).sum::<f64>();
        }
        let scale = match cfg.clip_norm {
            Some(c) if sq.sqrt() > c => c / sq.sqrt(),
            _ => 1.0,
        };
        for (name, g) in grads {
            let slot = self.slots.get_mut(name).expect("validated above");
            slot.step += 1;
            let t = slot.step as i32;
            let bc1 = 1.0 - cfg.beta1.powi(t);
            let bc2 = 1.0 - cfg.beta2.powi(t);
            let gd = g.data();
            let m = slot.m.data_mut();
            for (mi, &gi) in m.iter_mut().zip(gd) {
                *mi = cfg.beta1 * *mi + (1.0 - cfg.beta1) * gi * scale;
            }
            let v = slot.v.data_mut();
            for (vi, &gi) in v.iter_mut().zip(gd) {
                let gs = gi * scale;
                *vi = cfg.beta2 * *vi + (1.0 - cfg.beta2) * gs * gs;
            }
            let (m, v) = (slot.m.data(), slot.v.data());
            for ((p, &mi), &vi) in slot.value.data_mut().iter_mut().zip(m).zip(v) {
                let mh = mi / bc1;
                let vh = vi / bc2;
                *p -= cfg.lr * mh / (vh.sqrt() + cfg.eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one(name: &str, v: f64) -> ParameterStore {
        let mut s = ParameterStore::new();
        s.insert(name, Tensor::scalar(v));
        s
    }

    #[test]
    fn zero_gradient_keeps_parameters() {
        let mut s = one("p", 0.7);
        let g = BTreeMap::from([("p".to_string(), Tensor::scalar(0.0))]);
        s.adam_step(&g, &AdamConfig::default()).unwrap();
        assert_eq!(s.get("p").unwrap().item(), 0.7);
    }

    #[test]
    fn first_step_moves_by_lr() {
        let mut s = one("p", 0.0);
        let g = BTreeMap::from([("p".to_string(), Tensor::scalar(1.0))]);
        let cfg = AdamConfig {
            lr: 0.01,
            ..AdamConfig::default()
        };
        s.adam_step(&g, &cfg).unwrap();
        assert!((s.get("p").unwrap().item() + 0.01).abs() < 1e-9);
        assert_eq!(s.step_count("p"), Some(1));
    }

    #[test]
    fn nan_gradient_names_parameter_and_leaves_state() {
        let mut s = one("w.bias", 1.0);
        let before = s.clone();
        let g = BTreeMap::from([("w.bias".to_string(), Tensor::scalar(f64::NAN))]);
        let err = s.adam_step(&g, &AdamConfig::default()).unwrap_err();
        assert!(matches!(err, Error::Training { .. }));
        assert!(err.to_string().contains("w.bias"));
        assert_eq!(s, before);
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let mut s = one("p", 1.0);
        let g = BTreeMap::from([("p".to_string(), Tensor::zeros(&[2]))]);
        assert!(matches!(
            s.adam_step(&g, &AdamConfig::default()),
            Err(Error::Dimension { .. })
        ));
    }

    #[test]
    fn xavier_bound_respected() {
        let mut rng = RngStream::new(3, 0);
        let mut s = ParameterStore::new();
        s.insert_xavier("w", &[10, 6], 10, 6, &mut rng);
        let bound = (6.0f64 / 16.0).sqrt();
        assert!(s.get("w").unwrap().data().iter().all(|v| v.abs() <= bound));
    }
}
