//! Layers shared by the patch encoder and the language model.

use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::numerics::{init, Mask, Scalar, Tensor};
use crate::semlm::LoraAdapter;

pub type Rng = ChaCha8Rng;

/// Weight init std for every linear layer.
pub const INIT_STD: f64 = 0.02;

/// Per-forward state. Dropout is active only when a generator is supplied.
pub struct ForwardCtx<'a> {
    rng: Option<&'a mut Rng>,
}

impl<'a> ForwardCtx<'a> {
    pub fn eval() -> Self {
        ForwardCtx { rng: None }
    }

    pub fn train(rng: &'a mut Rng) -> Self {
        ForwardCtx { rng: Some(rng) }
    }

    pub fn is_training(&self) -> bool {
        self.rng.is_some()
    }

    pub fn dropout<T: Scalar>(&mut self, x: &Tensor<T>, p: f64) -> Tensor<T> {
        match self.rng.as_deref_mut() {
            Some(rng) if p > 0.0 => x.dropout(p, rng),
            _ => x.clone(),
        }
    }
}

/// Anything that owns named parameters.
pub trait Module<T: Scalar> {
    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor<T>));

    fn named_params(&self) -> Vec<(String, Tensor<T>)> {
        let mut out = Vec::new();
        self.visit_params("", &mut |name, t| out.push((name, t.clone())));
        out
    }

    fn trainable_params(&self) -> Vec<Tensor<T>> {
        self.named_params()
            .into_iter()
            .filter(|(_, t)| t.requires_grad())
            .map(|(_, t)| t)
            .collect()
    }

    fn trainable_count(&self) -> usize {
        self.trainable_params().iter().map(Tensor::numel).sum()
    }
}

pub(crate) fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

/// `y = x W + b (+ LoRA update)` with `W` stored as `[in, out]`.
#[derive(Clone)]
pub struct Linear<T: Scalar> {
    pub weight: Tensor<T>,
    pub bias: Option<Tensor<T>>,
    pub lora: Option<LoraAdapter<T>>,
}

impl<T: Scalar> Linear<T> {
    pub fn new(in_dim: usize, out_dim: usize, bias: bool, rng: &mut Rng) -> Self {
        Linear {
            weight: init::trunc_normal(&[in_dim, out_dim], INIT_STD, rng),
            bias: bias.then(|| init::zeros(&[out_dim])),
            lora: None,
        }
    }

    pub fn from_parts(weight: Tensor<T>, bias: Option<Tensor<T>>) -> Result<Self> {
        if weight.rank() != 2 {
            return Err(Error::contract(format!("linear weight must be 2-d, got {:?}", weight.shape())));
        }
        if let Some(b) = &bias {
            if b.shape() != [weight.shape()[1]] {
                return Err(Error::Dimension {
                    op: "linear",
                    left: weight.shape().to_vec(),
                    right: b.shape().to_vec(),
                });
            }
        }
        Ok(Linear {
            weight,
            bias,
            lora: None,
        })
    }

    pub fn in_dim(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn out_dim(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let mut y = x.matmul(&self.weight)?;
        if let Some(b) = &self.bias {
            y = y.add(b)?;
        }
        if let Some(lora) = &self.lora {
            y = y.add(&lora.forward(x)?)?;
        }
        Ok(y)
    }

    /// Base weights with any adapter folded in; the result has no adapter.
    pub fn merged(&self) -> Result<Linear<T>> {
        let weight = match &self.lora {
            Some(lora) => lora.merge_into(&self.weight)?,
            None => self.weight.detach(),
        };
        Ok(Linear {
            weight,
            bias: self.bias.as_ref().map(Tensor::detach),
            lora: None,
        })
    }

    pub fn set_requires_grad(&self, on: bool) {
        self.weight.set_requires_grad(on);
        if let Some(b) = &self.bias {
            b.set_requires_grad(on);
        }
    }
}

impl<T: Scalar> Module<T> for Linear<T> {
    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor<T>)) {
        f(join(prefix, "weight"), &self.weight);
        if let Some(b) = &self.bias {
            f(join(prefix, "bias"), b);
        }
        if let Some(l) = &self.lora {
            l.visit_params(&join(prefix, "lora"), f);
        }
    }
}

#[derive(Clone)]
pub struct LayerNorm<T: Scalar> {
    pub gain: Tensor<T>,
    pub bias: Tensor<T>,
    pub eps: f64,
}

impl<T: Scalar> LayerNorm<T> {
    pub fn new(dim: usize) -> Self {
        LayerNorm {
            gain: init::ones(&[dim]),
            bias: init::zeros(&[dim]),
            eps: 1e-5,
        }
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        x.layer_norm(&self.gain, &self.bias, T::c(self.eps))
    }

    pub fn set_requires_grad(&self, on: bool) {
        self.gain.set_requires_grad(on);
        self.bias.set_requires_grad(on);
    }
}

impl<T: Scalar> Module<T> for LayerNorm<T> {
    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor<T>)) {
        f(join(prefix, "weight"), &self.gain);
        f(join(prefix, "bias"), &self.bias);
    }
}

/// Two-layer GELU MLP.
#[derive(Clone)]
pub struct FeedForward<T: Scalar> {
    pub fc_in: Linear<T>,
    pub fc_out: Linear<T>,
}

impl<T: Scalar> FeedForward<T> {
    pub fn new(dim: usize, hidden: usize, rng: &mut Rng) -> Self {
        FeedForward {
            fc_in: Linear::new(dim, hidden, true, rng),
            fc_out: Linear::new(hidden, dim, true, rng),
        }
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        self.fc_out.forward(&self.fc_in.forward(x)?.gelu())
    }
}

impl<T: Scalar> Module<T> for FeedForward<T> {
    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor<T>)) {
        self.fc_in.visit_params(&join(prefix, "fc_in"), f);
        self.fc_out.visit_params(&join(prefix, "fc_out"), f);
    }
}

/// Scaled dot-product attention over `[batch, len, dim]` inputs.
#[derive(Clone)]
pub struct MultiHeadAttention<T: Scalar> {
    pub query: Linear<T>,
    pub key: Linear<T>,
    pub value: Linear<T>,
    pub out: Linear<T>,
    pub heads: usize,
}

impl<T: Scalar> MultiHeadAttention<T> {
    pub fn new(dim: usize, heads: usize, rng: &mut Rng) -> Result<Self> {
        if heads == 0 || !dim.is_multiple_of(heads) {
            return Err(Error::config(format!("dimension {dim} is not divisible by {heads} heads")));
        }
        Ok(MultiHeadAttention {
            query: Linear::new(dim, dim, true, rng),
            key: Linear::new(dim, dim, true, rng),
            value: Linear::new(dim, dim, true, rng),
            out: Linear::new(dim, dim, true, rng),
            heads,
        })
    }

    fn split_heads(&self, x: &Tensor<T>, b: usize, l: usize, d: usize) -> Result<Tensor<T>> {
        x.reshape(&[b, l, self.heads, d / self.heads])?.permute(&[0, 2, 1, 3])
    }

    /// Returns the projected output and the `[batch, heads, len, len]` weights.
    pub fn forward(
        &self,
        x: &Tensor<T>,
        mask: Option<&Mask>,
        ctx: &mut ForwardCtx<'_>,
        attn_dropout: f64,
    ) -> Result<(Tensor<T>, Tensor<T>)> {
        let &[b, l, d] = x.shape() else {
            return Err(Error::contract(format!("attention expects [batch, len, dim], got {:?}", x.shape())));
        };
        let q = self.split_heads(&self.query.forward(x)?, b, l, d)?;
        let k = self.split_heads(&self.key.forward(x)?, b, l, d)?;
        let v = self.split_heads(&self.value.forward(x)?, b, l, d)?;
        let scale = T::c(1.0 / ((d / self.heads) as f64).sqrt());
        let scores = q.matmul(&k.transpose_last2()?)?.scale(scale);
        let weights = scores.softmax_lastdim(mask)?;
        let attended = ctx.dropout(&weights, attn_dropout).matmul(&v)?;
        let merged = attended.permute(&[0, 2, 1, 3])?.reshape(&[b, l, d])?;
        Ok((self.out.forward(&merged)?, weights))
    }
}

impl<T: Scalar> Module<T> for MultiHeadAttention<T> {
    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor<T>)) {
        self.query.visit_params(&join(prefix, "query"), f);
        self.key.visit_params(&join(prefix, "key"), f);
        self.value.visit_params(&join(prefix, "value"), f);
        self.out.visit_params(&join(prefix, "out"), f);
    }
}
