//! AdamW with decoupled weight decay and bias-corrected moments.

use indexmap::IndexMap;

use super::param::ParamStore;
use super::tensor::{Tensor, TensorError};

#[derive(Debug, Clone, Copy)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-2,
        }
    }
}

pub struct AdamW {
    pub cfg: AdamWConfig,
    m: IndexMap<String, Vec<f64>>,
    v: IndexMap<String, Vec<f64>>,
    t: u64,
}

impl AdamW {
    pub fn new(cfg: AdamWConfig) -> Self {
        AdamW {
            cfg,
            m: IndexMap::new(),
            v: IndexMap::new(),
            t: 0,
        }
    }

    /// One update over every parameter in the store. Requires each parameter
    /// to carry a gradient; gradients themselves are left untouched so the
    /// caller controls when they are zeroed.
    pub fn step(&mut self, store: &mut ParamStore) -> Result<(), TensorError> {
        self.t += 1;
        let t = self.t as i32;
        let AdamWConfig { lr, beta1, beta2, eps, weight_decay } = self.cfg;
        let bc1 = 1.0 - beta1.powi(t);
        let bc2 = 1.0 - beta2.powi(t);

        let names: Vec<String> = store.names().map(str::to_string).collect();
        for name in names {
            let param = store.get(&name)?;
            let grad = param
                .grad()
                .ok_or_else(|| TensorError::MissingGrad(name.clone()))?;
            let n = param.numel();
            let m = self.m.entry(name.clone()).or_insert_with(|| vec![0.0; n]);
            let v = self.v.entry(name.clone()).or_insert_with(|| vec![0.0; n]);

            let mut data = param.data().to_vec();
            for i in 0..n {
                m[i] = beta1 * m[i] + (1.0 - beta1) * grad[i];
                v[i] = beta2 * v[i] + (1.0 - beta2) * grad[i] * grad[i];
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                data[i] -= lr * weight_decay * data[i];
                data[i] -= lr * m_hat / (v_hat.sqrt() + eps);
            }
            let shape = param.shape().to_vec();
            let replacement = Tensor::param_with_grad(data, shape, Some(grad));
            store.set(&name, replacement)?;
        }
        store.bump_step();
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Two optimizer steps, checked against a hand-unrolled update with bias
    /// correction and decoupled decay. Fixed gradient g = 0.5 both steps,
    /// start x0 = 1, lr = 0.1, betas (0.9, 0.999), eps 1e-8, wd 0.1.
    #[test]
    fn two_steps_match_hand_unroll() {
        let mut store = ParamStore::new();
        store
            .insert("x", Tensor::param(vec![1.0], &[1]).unwrap())
            .unwrap();
        let cfg = AdamWConfig {
            lr: 0.1,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.1,
        };
        let mut opt = AdamW::new(cfg);

        let hand = |x: f64, m: f64, v: f64, g: f64, t: i32| -> (f64, f64, f64) {
            let m1 = 0.9 * m + 0.1 * g;
            let v1 = 0.999 * v + 0.001 * g * g;
            let mh = m1 / (1.0 - 0.9f64.powi(t));
            let vh = v1 / (1.0 - 0.999f64.powi(t));
            let decayed = x - 0.1 * 0.1 * x;
            (decayed - 0.1 * mh / (vh.sqrt() + 1e-8), m1, v1)
        };
        let (x1, m1, v1) = hand(1.0, 0.0, 0.0, 0.5, 1);
        let (x2, _, _) = hand(x1, m1, v1, 0.5, 2);

        for _ in 0..2 {
            store.zero_grads();
            let loss = store.get("x").unwrap().mul_scalar(0.5).sum_all();
            loss.backward().unwrap();
            opt.step(&mut store).unwrap();
        }

        let got = store.get("x").unwrap().data()[0];
        assert!((got - x2).abs() < 1e-12, "got {got}, want {x2}");
        assert_eq!(store.step(), 2);
    }

    #[test]
    fn missing_gradient_is_an_error() {
        let mut store = ParamStore::new();
        store
            .insert("w", Tensor::param(vec![1.0, 2.0], &[2]).unwrap())
            .unwrap();
        let mut opt = AdamW::new(AdamWConfig::default());
        let err = opt.step(&mut store).unwrap_err();
        assert!(matches!(err, TensorError::MissingGrad(name) if name == "w"));
    }

    #[test]
    fn zeroed_gradient_only_applies_decay() {
        let mut store = ParamStore::new();
        store
            .insert("w", Tensor::param(vec![2.0], &[1]).unwrap())
            .unwrap();
        store.zero_grads();
        let cfg = AdamWConfig {
            lr: 0.5,
            weight_decay: 0.1,
            ..AdamWConfig::default()
        };
        let mut opt = AdamW::new(cfg);
        opt.step(&mut store).unwrap();
        let got = store.get("w").unwrap().data()[0];
        assert!((got - 2.0 * (1.0 - 0.05)).abs() < 1e-12);
    }
}
