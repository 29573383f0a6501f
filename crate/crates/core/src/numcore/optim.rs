use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::scalar::Scalar;

use super::{Array, NumError};

/// Index of a parameter inside a [`ParameterStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
struct Moments<T> {
    m: Vec<T>,
    v: Vec<T>,
}

/// Named trainable arrays plus AdamW moment estimates.
#[derive(Clone, Debug)]
pub struct ParameterStore<T> {
    names: Vec<String>,
    values: Vec<Array<T>>,
    lookup: HashMap<String, ParamId>,
    moments: Vec<Moments<T>>,
    step: u64,
}

impl<T: Scalar> Default for ParameterStore<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> ParameterStore<T> {
    pub fn new() -> Self {
        Self { names: Vec::new(), values: Vec::new(), lookup: HashMap::new(), moments: Vec::new(), step: 0 }
    }

    pub fn insert(&mut self, name: &str, value: Array<T>) -> Result<ParamId, NumError> {
        if self.lookup.contains_key(name) {
            return Err(NumError::DuplicateParameter(name.to_string()));
        }
        let id = ParamId(self.values.len());
        let n = value.numel();
        self.names.push(name.to_string());
        self.values.push(value);
        self.moments.push(Moments { m: vec![T::zero(); n], v: vec![T::zero(); n] });
        self.lookup.insert(name.to_string(), id);
        Ok(id)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.lookup.get(name).copied()
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn get(&self, id: ParamId) -> &Array<T> {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Array<T> {
        &mut self.values[id.0]
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Array<T>)> {
        self.names.iter().map(String::as_str).zip(&self.values)
    }

    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(Array::numel).sum()
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Same names and values in another precision; optimizer state is reset.
    pub fn cast<U: Scalar>(&self) -> ParameterStore<U> {
        let mut out = ParameterStore::new();
        for (name, v) in self.iter() {
            out.insert(name, v.cast()).expect("names already unique");
        }
        out
    }

    /// Zero-filled gradient buffers matching every parameter.
    pub fn zero_grads(&self) -> Vec<Vec<T>> {
        self.values.iter().map(|v| vec![T::zero(); v.numel()]).collect()
    }
}

/// AdamW hyper-parameters.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self { beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 1e-4 }
    }
}

/// One bias-corrected AdamW update. Weight decay is applied to the weights
/// directly (`w -= lr * wd * w`), never folded into the gradient.
pub fn adamw_step<T: Scalar>(
    store: &mut ParameterStore<T>,
    grads: &[Vec<T>],
    lr: f64,
    cfg: &AdamWConfig,
) -> Result<(), NumError> {
    if grads.len() != store.values.len() {
        return Err(NumError::ShapeMismatch { expected: vec![store.values.len()], found: vec![grads.len()] });
    }
    for (g, v) in grads.iter().zip(&store.values) {
        if g.len() != v.numel() {
            return Err(NumError::ShapeMismatch { expected: v.shape().to_vec(), found: vec![g.len()] });
        }
    }
    store.step += 1;
    let t = store.step as i32;
    let (b1, b2) = (T::lit(cfg.beta1), T::lit(cfg.beta2));
    let bc1 = T::one() - b1.powi(t);
    let bc2 = T::one() - b2.powi(t);
    let lr_t = T::lit(lr);
    let decay = T::lit(lr * cfg.weight_decay);
    let eps = T::lit(cfg.eps);
    for ((value, mom), g) in store.values.iter_mut().zip(store.moments.iter_mut()).zip(grads) {
        for (((w, m), v), &gk) in value.data_mut().iter_mut().zip(&mut mom.m).zip(&mut mom.v).zip(g) {
            *m = b1 * *m + (T::one() - b1) * gk;
            *v = b2 * *v + (T::one() - b2) * gk * gk;
            let mhat = *m / bc1;
            let vhat = *v / bc2;
            *w = *w - decay * *w - lr_t * mhat / (vhat.sqrt() + eps);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store_with(values: Vec<f64>) -> (ParameterStore<f64>, ParamId) {
        let mut s = ParameterStore::new();
        let id = s.insert("w", Array::from_vec(values)).unwrap();
        (s, id)
    }

    #[test]
    fn zero_gradient_without_decay_is_a_no_op() {
        let (mut s, id) = store_with(vec![0.3, -0.7]);
        let cfg = AdamWConfig { weight_decay: 0.0, ..Default::default() };
        adamw_step(&mut s, &[vec![0.0, 0.0]], 0.1, &cfg).unwrap();
        assert_eq!(s.get(id).data(), &[0.3, -0.7]);
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        let (mut s, id) = store_with(vec![1.0]);
        let cfg = AdamWConfig { weight_decay: 0.0, ..Default::default() };
        adamw_step(&mut s, &[vec![1.0]], 0.1, &cfg).unwrap();
        // mhat = 1, vhat = 1 -> delta = -0.1 / (1 + eps)
        let want = 1.0 - 0.1 / (1.0 + 1e-8);
        assert!((s.get(id).data()[0] - want).abs() < 1e-15);
    }

    #[test]
    fn decay_only_scales_weights() {
        let (mut s, id) = store_with(vec![2.0, -4.0]);
        let cfg = AdamWConfig { weight_decay: 0.1, ..Default::default() };
        adamw_step(&mut s, &[vec![0.0, 0.0]], 1.0, &cfg).unwrap();
        assert_eq!(s.get(id).data(), &[2.0 * 0.9, -4.0 * 0.9]);
    }

    #[test]
    fn gradient_shape_is_checked() {
        let (mut s, _) = store_with(vec![1.0, 2.0]);
        let err = adamw_step(&mut s, &[vec![1.0]], 0.1, &AdamWConfig::default());
        assert!(matches!(err, Err(NumError::ShapeMismatch { .. })));
    }

    #[test]
    fn duplicate_names_are_rejected() {
        let (mut s, _) = store_with(vec![1.0]);
        assert!(s.insert("w", Array::scalar(0.0)).is_err());
    }

    #[test]
    fn identical_inputs_are_bit_deterministic() {
        let run = || {
            let (mut s, id) = store_with(vec![0.1, 0.2, 0.3]);
            for k in 0..5 {
                let g = vec![0.01 * k as f64, -0.3, 0.7];
                adamw_step(&mut s, &[g], 1e-3, &AdamWConfig::default()).unwrap();
            }
            s.get(id).clone()
        };
        assert_eq!(run(), run());
    }
}
