//! Low-rank adapters on frozen projections.
//!
//! An adapter on a weight `W` (stored `[in, out]`) adds `scaling · x Aᵀ Bᵀ`
//! with `A: [rank, in]`, `B: [out, rank]` and `scaling = alpha / rank`. `B`
//! starts at zero, so a freshly attached adapter changes nothing.

use crate::error::{Error, Result};
use crate::nn::{join, Module, Rng};
use crate::numerics::{init, Scalar, Tensor};

#[derive(Clone)]
pub struct LoraAdapter<T: Scalar> {
    pub a: Tensor<T>,
    pub b: Tensor<T>,
    pub rank: usize,
    pub alpha: f64,
}

impl<T: Scalar> LoraAdapter<T> {
    pub fn new(in_dim: usize, out_dim: usize, rank: usize, alpha: f64, rng: &mut Rng) -> Result<Self> {
        if rank == 0 || rank >= in_dim.min(out_dim) {
            return Err(Error::config(format!(
                "LoRA rank {rank} must be in [1, {}) for a {in_dim}x{out_dim} projection",
                in_dim.min(out_dim)
            )));
        }
        // Kaiming-uniform bound for A, as in the reference implementation.
        let bound = 1.0 / (in_dim as f64).sqrt();
        Ok(LoraAdapter {
            a: init::uniform(&[rank, in_dim], bound, rng),
            b: init::zeros(&[out_dim, rank]),
            rank,
            alpha,
        })
    }

    pub fn scaling(&self) -> f64 {
        self.alpha / self.rank as f64
    }

    pub fn in_dim(&self) -> usize {
        self.a.shape()[1]
    }

    pub fn out_dim(&self) -> usize {
        self.b.shape()[0]
    }

    pub fn param_count(&self) -> usize {
        self.rank * (self.in_dim() + self.out_dim())
    }

    /// `scaling · x Aᵀ Bᵀ` for `x: [.., in]`.
    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let down = x.matmul(&self.a.transpose_last2()?)?;
        Ok(down.matmul(&self.b.transpose_last2()?)?.scale(T::c(self.scaling())))
    }

    /// `W + scaling · (B A)ᵀ` in the `[in, out]` storage convention.
    pub fn merge_into(&self, weight: &Tensor<T>) -> Result<Tensor<T>> {
        if weight.shape() != [self.in_dim(), self.out_dim()] {
            return Err(Error::Dimension {
                op: "lora_merge",
                left: weight.shape().to_vec(),
                right: vec![self.in_dim(), self.out_dim()],
            });
        }
        let (r, n_in, n_out) = (self.rank, self.in_dim(), self.out_dim());
        let a = self.a.data();
        let b = self.b.data();
        let s = T::c(self.scaling());
        let mut merged = weight.to_vec();
        for i in 0..n_in {
            for o in 0..n_out {
                let mut acc = T::zero();
                for k in 0..r {
                    acc += b[o * r + k] * a[k * n_in + i];
                }
                merged[i * n_out + o] += s * acc;
            }
        }
        Tensor::new(merged, weight.shape())
    }
}

impl<T: Scalar> Module<T> for LoraAdapter<T> {
    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor<T>)) {
        f(join(prefix, "a"), &self.a);
        f(join(prefix, "b"), &self.b);
    }
}
