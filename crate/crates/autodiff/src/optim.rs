//! Adam with bias correction and a linear learning-rate warm-up.

use crate::error::Result;
use crate::params::ParamStore;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Steps over which the learning rate ramps linearly from 0 to `lr`.
    pub warmup_steps: u64,
    /// Rescale gradients whose global L2 norm exceeds this value.
    pub clip_norm: Option<f64>,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { lr: 1e-3, beta1: 0.9, beta2: 0.999, eps: 1e-8, warmup_steps: 100, clip_norm: None }
    }
}

impl AdamConfig {
    /// Learning rate applied on (1-based) step `step`.
    pub fn lr_at(&self, step: u64) -> f64 {
        if self.warmup_steps == 0 || step >= self.warmup_steps {
            self.lr
        } else {
            self.lr * step as f64 / self.warmup_steps as f64
        }
    }
}

/// Optimizer state: first/second moments shaped like the parameters.
#[derive(Clone, Debug)]
pub struct Adam<T> {
    config: AdamConfig,
    step: u64,
    m: Vec<Tensor<T>>,
    v: Vec<Tensor<T>>,
}

impl<T: Scalar> Adam<T> {
    pub fn new(config: AdamConfig, params: &ParamStore<T>) -> Result<Self> {
        let zeros =
            |_| -> Result<Vec<Tensor<T>>> { params.iter().map(|(_, t)| Tensor::zeros(t.shape().to_vec())).collect() };
        Ok(Self { config, step: 0, m: zeros(())?, v: zeros(())? })
    }

    pub fn config(&self) -> &AdamConfig {
        &self.config
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    pub fn first_moment(&self, i: usize) -> &Tensor<T> {
        &self.m[i]
    }

    pub fn second_moment(&self, i: usize) -> &Tensor<T> {
        &self.v[i]
    }

    /// Applies one update. Fails without touching any state when a gradient
    /// is non-finite or mis-shaped. Returns the pre-clip global gradient norm.
    pub fn step(&mut self, params: &mut ParamStore<T>, grads: &[Tensor<T>]) -> Result<f64> {
        params.check_grads(grads)?;
        let norm = grads.iter().flat_map(|g| g.data()).map(|x| x.as_f64() * x.as_f64()).sum::<f64>().sqrt();
        let clip = match self.config.clip_norm {
            Some(c) if norm > c => c / norm,
            _ => 1.0,
        };
        self.step += 1;
        let t = self.step as i32;
        let lr = self.config.lr_at(self.step);
        let (b1, b2) = (self.config.beta1, self.config.beta2);
        let bc1 = 1.0 - b1.powi(t);
        let bc2 = 1.0 - b2.powi(t);
        let step_size = T::of(lr / bc1);
        let (tb1, tb2, tclip) = (T::of(b1), T::of(b2), T::of(clip));
        let (one_b1, one_b2) = (T::of(1.0 - b1), T::of(1.0 - b2));
        let inv_bc2_sqrt = T::of(1.0 / bc2.sqrt());
        let eps = T::of(self.config.eps);
        let ids: Vec<_> = params.ids().collect();
        for (i, id) in ids.into_iter().enumerate() {
            let p = params.get_mut(id).data_mut();
            let g = grads[i].data();
            let m = self.m[i].data_mut();
            let v = self.v[i].data_mut();
            for j in 0..p.len() {
                let gj = g[j] * tclip;
                m[j] = tb1 * m[j] + one_b1 * gj;
                v[j] = tb2 * v[j] + one_b2 * gj * gj;
                p[j] -= step_size * m[j] / (v[j].sqrt() * inv_bc2_sqrt + eps);
            }
        }
        Ok(norm)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::error::TensorError;

    fn scalar_store(v: f64) -> ParamStore<f64> {
        let mut s = ParamStore::new();
        s.add("w", Tensor::scalar(v));
        s
    }

    #[test]
    fn zero_gradient_leaves_parameters_unchanged() {
        let mut params = ParamStore::<f32>::new();
        params.add("a", Tensor::from_fn([2, 3], |i| i as f32).unwrap());
        let before = params.clone();
        let mut adam = Adam::new(AdamConfig::default(), &params).unwrap();
        for _ in 0..3 {
            adam.step(&mut params, &[Tensor::zeros([2, 3]).unwrap()]).unwrap();
        }
        assert_eq!(params, before);
        assert_eq!(adam.steps_taken(), 3);
    }

    #[test]
    fn matches_hand_computed_updates() {
        // Values from evaluating the bias-corrected Adam recursion by hand
        // with lr 0.1, betas (0.9, 0.999), eps 1e-8.
        let mut params = scalar_store(1.0);
        let config = AdamConfig { lr: 0.1, warmup_steps: 0, ..AdamConfig::default() };
        let mut adam = Adam::new(config, &params).unwrap();
        adam.step(&mut params, &[Tensor::scalar(0.5)]).unwrap();
        let p = params.get(params.find("w").unwrap()).data()[0];
        assert!((p - 0.900000002).abs() < 1e-12, "{p}");
        adam.step(&mut params, &[Tensor::scalar(-1.0)]).unwrap();
        let p = params.get(params.find("w").unwrap()).data()[0];
        assert!((p - 0.9366103542405654).abs() < 1e-12, "{p}");
        assert!((adam.first_moment(0).data()[0] + 0.055).abs() < 1e-15);
        assert!((adam.second_moment(0).data()[0] - 0.00124975).abs() < 1e-15);
    }

    #[test]
    fn linear_warmup() {
        let c = AdamConfig { lr: 0.001, warmup_steps: 100, ..AdamConfig::default() };
        assert!((c.lr_at(1) - 0.00001).abs() < 1e-18);
        assert!((c.lr_at(50) - 0.0005).abs() < 1e-15);
        assert_eq!(c.lr_at(100), 0.001);
        assert_eq!(c.lr_at(5000), 0.001);
    }

    #[test]
    fn non_finite_gradient_is_rejected_by_name() {
        let mut params = scalar_store(1.0);
        let mut adam = Adam::new(AdamConfig::default(), &params).unwrap();
        let err = adam.step(&mut params, &[Tensor::scalar(f64::NAN)]).unwrap_err();
        assert_eq!(err, TensorError::NonFiniteGradient("w".into()));
        assert_eq!(adam.steps_taken(), 0);
        assert_eq!(params.get(params.find("w").unwrap()).data(), &[1.0]);
    }

    #[test]
    fn identical_inputs_give_identical_updates() {
        let run = || {
            let mut params = scalar_store(0.3);
            let mut adam = Adam::new(AdamConfig::default(), &params).unwrap();
            for k in 0..10 {
                adam.step(&mut params, &[Tensor::scalar((k as f64).sin())]).unwrap();
            }
            params.get(params.find("w").unwrap()).data()[0].to_bits()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn clipping_bounds_the_effective_gradient() {
        let mut params = scalar_store(0.0);
        let config = AdamConfig { clip_norm: Some(1.0), warmup_steps: 0, ..AdamConfig::default() };
        let mut adam = Adam::new(config, &params).unwrap();
        let norm = adam.step(&mut params, &[Tensor::scalar(10.0)]).unwrap();
        assert_eq!(norm, 10.0);
        assert!((adam.first_moment(0).data()[0] - 0.1).abs() < 1e-12);
    }
}
