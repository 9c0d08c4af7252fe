//! Named parameter collections and the EMA shadow copy.

use indexmap::IndexMap;
use rand::Rng;
use rand_distr::{Distribution, Normal, Uniform};

use super::tensor::{Tensor, TensorError};

/// An ordered map of named leaf tensors. Iteration follows insertion order,
/// which fixes the optimizer update order and the checkpoint layout.
#[derive(Default)]
pub struct ParamStore {
    entries: IndexMap<String, Tensor>,
    step: u64,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: &str, tensor: Tensor) -> Result<(), TensorError> {
        if self.entries.contains_key(name) {
            return Err(TensorError::Store(format!("duplicate parameter `{name}`")));
        }
        self.entries.insert(name.to_string(), tensor);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Result<&Tensor, TensorError> {
        self.entries
            .get(name)
            .ok_or_else(|| TensorError::Store(format!("unknown parameter `{name}`")))
    }

    /// Replaces a parameter's tensor; the shape must not change.
    pub fn set(&mut self, name: &str, tensor: Tensor) -> Result<(), TensorError> {
        let slot = self
            .entries
            .get_mut(name)
            .ok_or_else(|| TensorError::Store(format!("unknown parameter `{name}`")))?;
        if slot.shape() != tensor.shape() {
            return Err(TensorError::ShapeMismatch {
                op: "ParamStore::set",
                lhs: slot.shape().to_vec(),
                rhs: tensor.shape().to_vec(),
            });
        }
        *slot = tensor;
        Ok(())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(|k| k.as_str())
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn num_values(&self) -> usize {
        self.entries.values().map(|t| t.numel()).sum()
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn set_step(&mut self, step: u64) {
        self.step = step;
    }

    pub(crate) fn bump_step(&mut self) {
        self.step += 1;
    }

    /// Resets every parameter's gradient buffer to zeros.
    pub fn zero_grads(&self) {
        for t in self.entries.values() {
            t.set_grad_zero();
        }
    }

    /// Fresh leaf copies of all parameters (gradients are not copied).
    pub fn deep_clone(&self, requires_grad: bool) -> ParamStore {
        let mut out = ParamStore::new();
        out.step = self.step;
        for (name, t) in &self.entries {
            let copy = if requires_grad {
                Tensor::param(t.data().to_vec(), t.shape()).expect("shape already validated")
            } else {
                Tensor::new(t.data().to_vec(), t.shape()).expect("shape already validated")
            };
            out.entries.insert(name.clone(), copy);
        }
        out
    }
}

/// Exponential moving average of a parameter store. The shadow copy never
/// requires gradients; it is what the teacher branch runs on.
pub struct EmaTracker {
    shadow: ParamStore,
    momentum: f64,
}

impl EmaTracker {
    /// Starts the shadow as an exact copy of `live`.
    pub fn new(live: &ParamStore, momentum: f64) -> Self {
        EmaTracker {
            shadow: live.deep_clone(false),
            momentum,
        }
    }

    /// Adopts a previously saved shadow (checkpoint resume).
    pub fn from_shadow(shadow: ParamStore, momentum: f64) -> Self {
        EmaTracker { shadow, momentum }
    }

    pub fn shadow(&self) -> &ParamStore {
        &self.shadow
    }

    pub fn momentum(&self) -> f64 {
        self.momentum
    }

    /// shadow <- m * shadow + (1 - m) * live, per parameter.
    pub fn update(&mut self, live: &ParamStore) -> Result<(), TensorError> {
        let mismatched: Vec<&str> = self
            .shadow
            .names()
            .zip(live.names())
            .filter(|(a, b)| a != b)
            .map(|(a, _)| a)
            .collect();
        if self.shadow.len() != live.len() || !mismatched.is_empty() {
            return Err(TensorError::Store(format!(
                "EMA shadow and live stores disagree on parameter names: {:?}",
                mismatched
            )));
        }
        let m = self.momentum;
        let names: Vec<String> = self.shadow.names().map(str::to_string).collect();
        for name in names {
            let live_t = live.get(&name)?;
            let shadow_t = self.shadow.get(&name)?;
            if live_t.shape() != shadow_t.shape() {
                return Err(TensorError::ShapeMismatch {
                    op: "EmaTracker::update",
                    lhs: shadow_t.shape().to_vec(),
                    rhs: live_t.shape().to_vec(),
                });
            }
            let blended: Vec<f64> = shadow_t
                .data()
                .iter()
                .zip(live_t.data())
                .map(|(&s, &l)| m * s + (1.0 - m) * l)
                .collect();
            let shape = shadow_t.shape().to_vec();
            self.shadow.set(&name, Tensor::new(blended, &shape)?)?;
        }
        Ok(())
    }
}

/// Weight-initialization helpers, all drawing from a caller-provided RNG so
/// the full init sequence is reproducible.
pub mod init {
    use super::*;

    /// Uniform on ±1/sqrt(fan_in), the usual default for linear layers.
    pub fn linear_weight(rng: &mut impl Rng, fan_in: usize, fan_out: usize) -> Tensor {
        let bound = 1.0 / (fan_in as f64).sqrt();
        let dist = Uniform::new_inclusive(-bound, bound);
        let data: Vec<f64> = (0..fan_in * fan_out).map(|_| dist.sample(rng)).collect();
        Tensor::param(data, &[fan_in, fan_out]).expect("length matches shape")
    }

    pub fn normal(rng: &mut impl Rng, shape: &[usize], std: f64) -> Tensor {
        let dist = Normal::new(0.0, std).expect("std must be finite");
        let n: usize = shape.iter().product();
        let data: Vec<f64> = (0..n).map(|_| dist.sample(rng)).collect();
        Tensor::param(data, shape).expect("length matches shape")
    }

    pub fn zeros(shape: &[usize]) -> Tensor {
        let n: usize = shape.iter().product();
        Tensor::param(vec![0.0; n], shape).expect("length matches shape")
    }

    pub fn ones(shape: &[usize]) -> Tensor {
        let n: usize = shape.iter().product();
        Tensor::param(vec![1.0; n], shape).expect("length matches shape")
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::util::{stream_rng, Stream};

    fn small_store() -> ParamStore {
        let mut s = ParamStore::new();
        s.insert("w", Tensor::param(vec![1.0, 2.0], &[2]).unwrap()).unwrap();
        s.insert("b", Tensor::param(vec![0.5], &[1]).unwrap()).unwrap();
        s
    }

    #[test]
    fn duplicate_and_missing_names_error() {
        let mut s = small_store();
        assert!(s.insert("w", Tensor::scalar(0.0)).is_err());
        assert!(s.get("nope").is_err());
        assert!(s.set("nope", Tensor::scalar(0.0)).is_err());
    }

    #[test]
    fn set_rejects_shape_change() {
        let mut s = small_store();
        let err = s.set("w", Tensor::new(vec![1.0], &[1]).unwrap()).unwrap_err();
        assert!(matches!(err, TensorError::ShapeMismatch { .. }));
    }

    #[test]
    fn iteration_follows_insertion_order() {
        let s = small_store();
        let names: Vec<&str> = s.names().collect();
        assert_eq!(names, vec!["w", "b"]);
    }

    #[test]
    fn ema_identical_stores_are_a_fixed_point() {
        let live = small_store();
        let mut ema = EmaTracker::new(&live, 0.9);
        for _ in 0..5 {
            ema.update(&live).unwrap();
        }
        for (name, t) in live.iter() {
            assert_eq!(ema.shadow().get(name).unwrap().data(), t.data());
        }
    }

    #[test]
    fn ema_blends_toward_live() {
        let mut live = small_store();
        let mut ema = EmaTracker::new(&live, 0.75);
        live.set("w", Tensor::param(vec![5.0, 6.0], &[2]).unwrap()).unwrap();
        ema.update(&live).unwrap();
        // 0.75 * old + 0.25 * new
        assert_eq!(ema.shadow().get("w").unwrap().data(), &[2.0, 3.0]);
        assert!(!ema.shadow().get("w").unwrap().requires_grad());
    }

    #[test]
    fn ema_name_mismatch_is_reported() {
        let live = small_store();
        let mut other = ParamStore::new();
        other.insert("w", Tensor::param(vec![0.0, 0.0], &[2]).unwrap()).unwrap();
        let mut ema = EmaTracker::new(&other, 0.9);
        assert!(ema.update(&live).is_err());
    }

    #[test]
    fn init_is_reproducible_per_stream() {
        let mut a = stream_rng(3, Stream::WeightInit, 0);
        let mut b = stream_rng(3, Stream::WeightInit, 0);
        let wa = init::linear_weight(&mut a, 8, 4);
        let wb = init::linear_weight(&mut b, 8, 4);
        assert_eq!(wa.data(), wb.data());
        let bound = 1.0 / (8.0f64).sqrt();
        assert!(wa.data().iter().all(|v| v.abs() <= bound));
    }
}
