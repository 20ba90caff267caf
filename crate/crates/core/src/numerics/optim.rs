use std::collections::BTreeMap;

use crate::error::{Error, Result};

use super::tape::Gradients;
use super::tensor::{Real, Tensor};

/// A named parameter and its Adam moments.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamEntry<T: Real> {
    pub value: Tensor<T>,
    pub m: Tensor<T>,
    pub v: Tensor<T>,
    /// Number of optimizer updates this parameter has received.
    pub step: u64,
}

impl<T: Real> ParamEntry<T> {
    pub fn new(value: Tensor<T>) -> Self {
        let m = Tensor::zeros(value.shape());
        let v = Tensor::zeros(value.shape());
        ParamEntry {
            value,
            m,
            v,
            step: 0,
        }
    }
}

/// Parameters keyed by hierarchical name (`"io.in.r8.weight"`), in sorted order.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamStore<T: Real> {
    entries: BTreeMap<String, ParamEntry<T>>,
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore {
            entries: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor<T>) -> Result<()> {
        let name = name.into();
        if self.entries.contains_key(&name) {
            return Err(Error::invalid("param_store", format!("duplicate parameter {name}")));
        }
        self.entries.insert(name, ParamEntry::new(value));
        Ok(())
    }

    pub fn insert_entry(&mut self, name: impl Into<String>, entry: ParamEntry<T>) -> Result<()> {
        let name = name.into();
        if entry.m.shape() != entry.value.shape() || entry.v.shape() != entry.value.shape() {
            return Err(Error::shape("param_store", entry.value.shape(), entry.m.shape()));
        }
        if self.entries.insert(name.clone(), entry).is_some() {
            return Err(Error::invalid("param_store", format!("duplicate parameter {name}")));
        }
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.entries.get(name).map(|e| &e.value)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.entries.get_mut(name).map(|e| &mut e.value)
    }

    pub fn entry(&self, name: &str) -> Option<&ParamEntry<T>> {
        self.entries.get(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &ParamEntry<T>)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn numel(&self) -> usize {
        self.entries.values().map(|e| e.value.numel()).sum()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Bias-corrected Adam update applied to exactly the keys in `grads`.
///
/// Every gradient is validated before any parameter changes, so a failed step
/// leaves the store untouched. Each parameter keeps its own step counter, which
/// keeps bias correction right when stages update disjoint subsets.
pub fn adam_step<T: Real>(
    params: &mut ParamStore<T>,
    grads: &Gradients<T>,
    cfg: &AdamConfig,
) -> Result<()> {
    for (name, g) in grads {
        let entry = params
            .entries
            .get(name)
            .ok_or_else(|| Error::invalid("adam_step", format!("unknown parameter {name}")))?;
        if entry.value.shape() != g.shape() {
            return Err(Error::shape("adam_step", entry.value.shape(), g.shape()));
        }
        if !g.is_finite() {
            return Err(Error::NonFinite {
                context: format!("gradient of {name}"),
            });
        }
    }
    let b1 = T::from_f64_lossy(cfg.beta1);
    let b2 = T::from_f64_lossy(cfg.beta2);
    let one_m_b1 = T::from_f64_lossy(1.0 - cfg.beta1);
    let one_m_b2 = T::from_f64_lossy(1.0 - cfg.beta2);
    let eps = T::from_f64_lossy(cfg.eps);
    for (name, g) in grads {
        let e = params.entries.get_mut(name).expect("validated above");
        e.step += 1;
        let t = e.step as i32;
        let bc1 = T::from_f64_lossy(1.0 - cfg.beta1.powi(t));
        let bc2 = T::from_f64_lossy(1.0 - cfg.beta2.powi(t));
        let lr = T::from_f64_lossy(cfg.lr);
        let it = e
            .value
            .data_mut()
            .iter_mut()
            .zip(e.m.data_mut().iter_mut())
            .zip(e.v.data_mut().iter_mut())
            .zip(g.data());
        for (((p, m), v), &gi) in it {
            *m = b1 * *m + one_m_b1 * gi;
            *v = b2 * *v + one_m_b2 * gi * gi;
            let mhat = *m / bc1;
            let vhat = *v / bc2;
            *p = *p - lr * mhat / (vhat.sqrt() + eps);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store(vals: &[(&str, f64)]) -> ParamStore<f64> {
        let mut s = ParamStore::new();
        for (n, v) in vals {
            s.insert(*n, Tensor::scalar(*v)).unwrap();
        }
        s
    }

    #[test]
    fn empty_grads_leave_params_bit_identical() {
        let mut s = store(&[("a", 0.3), ("b", -1.7)]);
        let before = s.clone();
        adam_step(&mut s, &Gradients::new(), &AdamConfig::default()).unwrap();
        assert_eq!(s, before);
    }

    /// Scalar Adam recurrence evaluated by hand, step by step.
    fn adam_oracle(theta: f64, grads: &[f64], lr: f64, b1: f64, b2: f64, eps: f64) -> (f64, f64, f64) {
        let (mut th, mut m, mut v) = (theta, 0.0, 0.0);
        for (i, g) in grads.iter().enumerate() {
            let t = (i + 1) as i32;
            m = b1 * m + (1.0 - b1) * g;
            v = b2 * v + (1.0 - b2) * g * g;
            th -= lr * (m / (1.0 - b1.powi(t))) / ((v / (1.0 - b2.powi(t))).sqrt() + eps);
        }
        (th, m, v)
    }

    #[test]
    fn first_step_matches_hand_computation() {
        let cfg = AdamConfig::default();
        let mut s = store(&[("w", 2.0)]);
        let mut g = Gradients::new();
        g.insert("w".to_string(), Tensor::scalar(0.4));
        adam_step(&mut s, &g, &cfg).unwrap();
        // step 1: mhat = g, vhat = g^2 -> update = lr * g / (|g| + eps)
        let want = 2.0 - 1e-3 * 0.4 / (0.4 + 1e-8);
        assert!((s.get("w").unwrap().data()[0] - want).abs() < 1e-15);
        let (th, _, _) = adam_oracle(2.0, &[0.4], 1e-3, 0.9, 0.999, 1e-8);
        assert!((th - want).abs() < 1e-15);
    }

    #[test]
    fn two_steps_follow_the_moment_recurrence() {
        let cfg = AdamConfig::default();
        let mut s = store(&[("w", -0.5)]);
        let mut g = Gradients::new();
        g.insert("w".to_string(), Tensor::scalar(-1.5));
        adam_step(&mut s, &g, &cfg).unwrap();
        adam_step(&mut s, &g, &cfg).unwrap();
        let (th, m, v) = adam_oracle(-0.5, &[-1.5, -1.5], 1e-3, 0.9, 0.999, 1e-8);
        let e = s.entry("w").unwrap();
        assert_eq!(e.step, 2);
        assert!((e.m.data()[0] - m).abs() < 1e-15);
        assert!((e.v.data()[0] - v).abs() < 1e-15);
        assert!((e.value.data()[0] - th).abs() < 1e-14);
    }

    #[test]
    fn only_listed_keys_change() {
        let mut s = store(&[("a", 1.0), ("b", 2.0), ("c", 3.0)]);
        let before = s.clone();
        let mut g = Gradients::new();
        g.insert("b".to_string(), Tensor::scalar(0.1));
        adam_step(&mut s, &g, &AdamConfig::default()).unwrap();
        assert_eq!(s.entry("a"), before.entry("a"));
        assert_eq!(s.entry("c"), before.entry("c"));
        assert_ne!(s.entry("b"), before.entry("b"));
    }

    #[test]
    fn non_finite_gradient_is_named_and_nothing_moves() {
        let mut s = store(&[("a", 1.0), ("b", 2.0)]);
        let before = s.clone();
        let mut g = Gradients::new();
        g.insert("a".to_string(), Tensor::scalar(0.1));
        g.insert("b".to_string(), Tensor::scalar(f64::NAN));
        let err = adam_step(&mut s, &g, &AdamConfig::default()).unwrap_err();
        assert!(err.to_string().contains('b'));
        assert_eq!(s, before);
    }
}
