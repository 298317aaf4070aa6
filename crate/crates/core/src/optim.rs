//! Adam with bias correction.

use serde::{Deserialize, Serialize};

use crate::error::{arg, Result};
use crate::nets::ParamSet;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { learning_rate: 1e-4, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

impl AdamConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0) || !self.learning_rate.is_finite() {
            return Err(arg(format!("learning rate must be positive, got {}", self.learning_rate)));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(b > 0.0 && b < 1.0) {
                return Err(arg(format!("{name} must lie in (0, 1), got {b}")));
            }
        }
        if !(self.eps > 0.0) {
            return Err(arg("adam eps must be positive"));
        }
        Ok(())
    }
}

/// First and second moments for one [`ParamSet`], in its parameter order.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState<T> {
    pub step: u64,
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
}

impl<T: Scalar> AdamState<T> {
    pub fn new(params: &ParamSet<T>) -> Self {
        let zeros = || params.iter().map(|(_, t)| Tensor::zeros(t.shape())).collect();
        Self { step: 0, m: zeros(), v: zeros() }
    }

    pub fn matches(&self, params: &ParamSet<T>) -> bool {
        self.m.len() == params.len()
            && self.v.len() == params.len()
            && params.iter().zip(&self.m).zip(&self.v).all(|(((_, p), m), v)| p.shape() == m.shape() && p.shape() == v.shape())
    }

    /// Applies one update. Parameters without a gradient keep their moments and values.
    pub fn update(&mut self, params: &mut ParamSet<T>, grads: &[Option<Tensor<T>>], cfg: &AdamConfig) -> Result<()> {
        if grads.len() != params.len() || !self.matches(params) {
            return Err(arg("optimizer state does not match the parameter set"));
        }
        self.step += 1;
        let t = self.step as i32;
        let (b1, b2) = (T::c(cfg.beta1), T::c(cfg.beta2));
        let c1 = T::c(1.0 - cfg.beta1.powi(t));
        let c2 = T::c(1.0 - cfg.beta2.powi(t));
        let (lr, eps) = (T::c(cfg.learning_rate), T::c(cfg.eps));
        for (i, (_, p)) in params.iter_mut().enumerate() {
            let Some(g) = &grads[i] else { continue };
            if g.shape() != p.shape() {
                return Err(arg("gradient shape mismatch"));
            }
            let (m, v) = (self.m[i].data_mut(), self.v[i].data_mut());
            for (((pv, &gv), mv), vv) in p.data_mut().iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
                *mv = b1 * *mv + (T::one() - b1) * gv;
                *vv = b2 * *vv + (T::one() - b2) * gv * gv;
                let mhat = *mv / c1;
                let vhat = *vv / c2;
                *pv -= lr * mhat / (vhat.sqrt() + eps);
            }
        }
        Ok(())
    }

    pub fn cast<U: Scalar>(&self) -> AdamState<U> {
        AdamState { step: self.step, m: self.m.iter().map(|t| t.cast()).collect(), v: self.v.iter().map(|t| t.cast()).collect() }
    }
}

/// Euclidean norm over all present gradients.
pub fn grad_norm<T: Scalar>(grads: &[Option<Tensor<T>>]) -> f64 {
    grads.iter().flatten().map(|g| g.squared_norm().to_f64_lossy()).sum::<f64>().sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_step_matches_hand_computation() {
        // f(p) = (p - 3)^2 from p = 0
        let mut params = ParamSet::new();
        params.insert("p", Tensor::from_vec(&[1], vec![0.0f64]).unwrap());
        let cfg = AdamConfig { learning_rate: 0.01, ..AdamConfig::default() };
        let mut state = AdamState::new(&params);
        let g = 2.0 * (0.0 - 3.0);
        state.update(&mut params, &[Some(Tensor::from_vec(&[1], vec![g]).unwrap())], &cfg).unwrap();
        let m = 0.1 * g;
        let v = 0.001 * g * g;
        let want = -0.01 * (m / 0.1) / ((v / 0.001).sqrt() + 1e-8);
        assert!((params.get("p").unwrap().data()[0] - want).abs() < 1e-12);

        // second step from the updated point
        let p1 = params.get("p").unwrap().data()[0];
        let g2 = 2.0 * (p1 - 3.0);
        state.update(&mut params, &[Some(Tensor::from_vec(&[1], vec![g2]).unwrap())], &cfg).unwrap();
        let m2 = 0.9 * m + 0.1 * g2;
        let v2 = 0.999 * v + 0.001 * g2 * g2;
        let want2 = p1 - 0.01 * (m2 / (1.0 - 0.81)) / ((v2 / (1.0 - 0.999f64.powi(2))).sqrt() + 1e-8);
        assert!((params.get("p").unwrap().data()[0] - want2).abs() < 1e-12);
    }

    #[test]
    fn missing_gradient_leaves_parameter_untouched() {
        let mut params = ParamSet::new();
        params.insert("a", Tensor::full(&[2], 1.0f64));
        params.insert("b", Tensor::full(&[2], 1.0f64));
        let mut state = AdamState::new(&params);
        state.update(&mut params, &[None, Some(Tensor::full(&[2], 0.5))], &AdamConfig::default()).unwrap();
        assert_eq!(params.get("a").unwrap().data(), &[1.0, 1.0]);
        assert!(params.get("b").unwrap().data()[0] < 1.0);
    }

    #[test]
    fn config_validation() {
        assert!(AdamConfig { learning_rate: 0.0, ..AdamConfig::default() }.validate().is_err());
        assert!(AdamConfig { beta1: 1.0, ..AdamConfig::default() }.validate().is_err());
        assert!(AdamConfig::default().validate().is_ok());
    }
}
