use crate::error::{Error, Result};
use crate::net::ParamSet;
use crate::scalar::Scalar;
use crate::tensor::TensorBuf;

/// Default learning rate.
pub const DEFAULT_LR: f64 = 5e-4;

/// Adam moments and hyperparameters, with bias correction.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState<T> {
    pub lr: T,
    pub beta1: T,
    pub beta2: T,
    pub eps: T,
    step: u64,
    m: Vec<TensorBuf<T>>,
    v: Vec<TensorBuf<T>>,
}

impl<T: Scalar> AdamState<T> {
    pub fn new<P: ParamSet<T>>(params: &P, lr: T) -> Self {
        let zeros: Vec<_> = params.tensors().iter().map(|t| t.zeros_like()).collect();
        Self {
            lr,
            beta1: T::of(0.9),
            beta2: T::of(0.999),
            eps: T::of(1e-8),
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// One bias-corrected Adam update of `params` in place.
    pub fn step<P: ParamSet<T>>(&mut self, params: &mut P, grads: &[TensorBuf<T>]) -> Result<()> {
        let names = params.names();
        let mut tensors = params.tensors_mut();
        if tensors.len() != grads.len() || tensors.len() != self.m.len() {
            return Err(Error::ShapeMismatch(format!(
                "{} parameter tensors, {} gradients, {} optimizer slots",
                tensors.len(),
                grads.len(),
                self.m.len()
            )));
        }
        for ((t, g), name) in tensors.iter().zip(grads).zip(&names) {
            if t.shape() != g.shape() {
                return Err(Error::ShapeMismatch(format!(
                    "gradient for {name} has shape {:?}, parameter has {:?}",
                    g.shape(),
                    t.shape()
                )));
            }
            if let Some(i) = g.data().iter().position(|x| !x.is_finite()) {
                return Err(Error::NonFinite {
                    what: format!("gradient of {name} at index {i}"),
                });
            }
        }

        self.step += 1;
        let t = self.step as i32;
        let c1 = T::one() - self.beta1.powi(t);
        let c2 = T::one() - self.beta2.powi(t);
        let (b1, b2) = (self.beta1, self.beta2);
        for (((param, g), m), v) in tensors
            .iter_mut()
            .zip(grads)
            .zip(self.m.iter_mut())
            .zip(self.v.iter_mut())
        {
            let iter = param
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut().iter_mut().zip(v.data_mut().iter_mut()));
            for ((p, &gi), (mi, vi)) in iter {
                *mi = b1 * *mi + (T::one() - b1) * gi;
                *vi = b2 * *vi + (T::one() - b2) * gi * gi;
                let m_hat = *mi / c1;
                let v_hat = *vi / c2;
                *p -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}
