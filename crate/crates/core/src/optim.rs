use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Result};
use crate::nets::ParamSet;
use crate::real::Real;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { lr: 0.002, beta1: 0.0, beta2: 0.99, eps: 1e-8 }
    }
}

/// Adam moments for one parameter set.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam<T> {
    pub cfg: AdamConfig,
    pub step: u64,
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
}

impl<T: Real> Adam<T> {
    pub fn new(cfg: AdamConfig, params: &ParamSet<T>) -> Self {
        let zeros = || params.tensors().iter().map(|t| Tensor::zeros(t.shape())).collect();
        Self { cfg, step: 0, m: zeros(), v: zeros() }
    }

    /// One update; `grads[i]` of `None` leaves parameter `i` and its moments untouched.
    pub fn update(&mut self, params: &mut ParamSet<T>, grads: &[Option<Tensor<T>>]) -> Result<()> {
        if grads.len() != params.len() {
            return Err(shape_err!("{} gradients for {} parameters", grads.len(), params.len()));
        }
        self.step += 1;
        let c = |v: f64| T::from_f64_lossy(v);
        let (b1, b2) = (self.cfg.beta1, self.cfg.beta2);
        let t = self.step as i32;
        let lr_t = c(self.cfg.lr * (1.0 - b2.powi(t)).sqrt() / (1.0 - b1.powi(t)));
        let (b1, b2, eps) = (c(b1), c(b2), c(self.cfg.eps));
        let (one_b1, one_b2) = (T::one() - b1, T::one() - b2);
        for (i, g) in grads.iter().enumerate() {
            let Some(g) = g else { continue };
            let p = &mut params.tensors_mut()[i];
            if g.shape() != p.shape() {
                return Err(shape_err!("gradient shape {:?} for parameter {:?}", g.shape(), p.shape()));
            }
            let m = self.m[i].data_mut();
            let v = self.v[i].data_mut();
            for (((pv, &gv), mv), vv) in p.data_mut().iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
                *mv = b1 * *mv + one_b1 * gv;
                *vv = b2 * *vv + one_b2 * gv * gv;
                *pv = *pv - lr_t * *mv / (vv.sqrt() + eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_moves_by_lr_against_the_gradient_sign() {
        let g = crate::nets::build_generator::<f64>(&crate::nets::GeneratorConfig::new(4, 32, vec![2, 2, 2], 0)).unwrap();
        let mut params = crate::nets::Network::params(&g).clone();
        let before = params.clone();
        let mut adam = Adam::new(AdamConfig::default(), &params);
        let grads: Vec<Option<Tensor<f64>>> = params.tensors().iter().map(|t| Some(t.map(|_| 3.0))).collect();
        adam.update(&mut params, &grads).unwrap();
        for (a, b) in params.tensors().iter().zip(before.tensors()) {
            for (x, y) in a.data().iter().zip(b.data()) {
                assert!((y - x - 0.002).abs() < 1e-9);
            }
        }
    }
}
