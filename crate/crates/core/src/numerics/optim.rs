use super::tensor::{Scalar, Tensor};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub betas: (f64, f64),
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-4,
            betas: (0.9, 0.999),
            eps: 1e-8,
        }
    }
}

/// Adam with bias-corrected moment estimates.
///
/// `step` leaves gradients in place; call [`Adam::zero_grad`] before the next
/// backward pass.
pub struct Adam<T: Scalar> {
    params: Vec<Tensor<T>>,
    cfg: AdamConfig,
    first: Vec<Vec<T>>,
    second: Vec<Vec<T>>,
    steps: u64,
}

impl<T: Scalar> Adam<T> {
    pub fn new(params: Vec<Tensor<T>>, cfg: AdamConfig) -> Self {
        let first = params.iter().map(|p| vec![T::zero(); p.numel()]).collect();
        let second = params.iter().map(|p| vec![T::zero(); p.numel()]).collect();
        Adam {
            params,
            cfg,
            first,
            second,
            steps: 0,
        }
    }

    pub fn params(&self) -> &[Tensor<T>] {
        &self.params
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    pub fn set_lr(&mut self, lr: f64) {
        self.cfg.lr = lr;
    }

    pub fn step(&mut self) -> Result<()> {
        let grads = self
            .params
            .iter()
            .enumerate()
            .map(|(i, p)| {
                p.grad().ok_or_else(|| {
                    Error::contract(format!("parameter #{i} (shape {:?}) has no gradient", p.shape()))
                })
            })
            .collect::<Result<Vec<_>>>()?;

        self.steps += 1;
        let t = self.steps as i32;
        let (b1, b2) = self.cfg.betas;
        let bias1 = 1.0 - b1.powi(t);
        let bias2 = 1.0 - b2.powi(t);
        let (b1, b2) = (T::c(b1), T::c(b2));
        let lr = T::c(self.cfg.lr);
        let eps = T::c(self.cfg.eps);
        let (bias1, bias2) = (T::c(bias1), T::c(bias2));

        for (((p, g), m), v) in self.params.iter().zip(&grads).zip(&mut self.first).zip(&mut self.second) {
            let mut data = p.data_mut();
            for i in 0..g.len() {
                m[i] = b1 * m[i] + (T::one() - b1) * g[i];
                v[i] = b2 * v[i] + (T::one() - b2) * g[i] * g[i];
                let m_hat = m[i] / bias1;
                let v_hat = v[i] / bias2;
                data[i] -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }

    pub fn zero_grad(&self) {
        self.params.iter().for_each(Tensor::zero_grad);
    }
}

/// One Adam update over `params` with fresh moment state.
pub fn adam_step<T: Scalar>(params: &[Tensor<T>], lr: f64, betas: (f64, f64), eps: f64) -> Result<()> {
    Adam::new(params.to_vec(), AdamConfig { lr, betas, eps }).step()
}
