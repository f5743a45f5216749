//! Adam with bias correction, no weight decay.

use crate::nn::{ParamStore, Trainable};
use crate::tensor::{Scalar, Tensor};

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq)]
pub struct Adam<T> {
    pub lr: f64,
    pub step: u64,
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
}

impl<T: Scalar> Adam<T> {
    pub fn new<S: Scalar>(store: &ParamStore<S>, lr: f64) -> Self {
        let zeros = || store.params.iter().map(|p| Tensor::zeros(p.value.shape())).collect();
        Self {
            lr,
            step: 0,
            m: zeros(),
            v: zeros(),
        }
    }

    /// One update of every parameter in a trainable group that has a gradient.
    /// Parameters outside `trainable` and their moments are left untouched.
    pub fn step(&mut self, store: &mut ParamStore<T>, grads: &[Option<Tensor<T>>], trainable: Trainable) {
        self.step += 1;
        let t = self.step as i32;
        let (b1, b2) = (T::from_f64(BETA1), T::from_f64(BETA2));
        let c1 = T::one() - T::from_f64(BETA1.powi(t));
        let c2 = T::one() - T::from_f64(BETA2.powi(t));
        let lr = T::from_f64(self.lr);
        let eps = T::from_f64(ADAM_EPS);
        for (i, grad) in grads.iter().enumerate() {
            let Some(g) = grad else { continue };
            if !trainable.includes(store.group(i)) {
                continue;
            }
            let m = self.m[i].data_mut();
            let v = self.v[i].data_mut();
            let p = store.params[i].value.data_mut();
            for k in 0..p.len() {
                let gk = g.data()[k];
                m[k] = b1 * m[k] + (T::one() - b1) * gk;
                v[k] = b2 * v[k] + (T::one() - b2) * gk * gk;
                let m_hat = m[k] / c1;
                let v_hat = v[k] / c2;
                p[k] -= lr * (m_hat / (v_hat.sqrt() + eps));
            }
        }
    }
}
