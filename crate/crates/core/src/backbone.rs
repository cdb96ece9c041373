//! Patch Transformer encoder and flatten-and-project forecasting head.
//!
//! `Z = X W_t + E_pos` embeds the `[batch, n_patches, patch_len]` input; a
//! stack of pre-norm bidirectional encoder layers follows. The stack can be
//! run in two halves around `fusion_after_layer` so that an external
//! representation can be blended into the intermediate activations.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{join, FeedForward, ForwardCtx, LayerNorm, Linear, Module, MultiHeadAttention, Rng, INIT_STD};
use crate::numerics::{init, Scalar, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BackboneConfig {
    pub d_model: usize,
    pub heads: usize,
    pub layers: usize,
    pub fusion_after_layer: usize,
    pub ffn_mult: usize,
    pub dropout: f64,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        BackboneConfig {
            d_model: 16,
            heads: 4,
            layers: 3,
            fusion_after_layer: 2,
            ffn_mult: 4,
            dropout: 0.1,
        }
    }
}

impl BackboneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d_model == 0 || self.heads == 0 || !self.d_model.is_multiple_of(self.heads) {
            return Err(Error::config(format!(
                "d_model {} must be a positive multiple of heads {}",
                self.d_model, self.heads
            )));
        }
        if self.fusion_after_layer == 0 || self.fusion_after_layer >= self.layers {
            return Err(Error::config(format!(
                "fusion_after_layer {} must lie in [1, {})",
                self.fusion_after_layer, self.layers
            )));
        }
        if self.ffn_mult == 0 {
            return Err(Error::config("ffn_mult must be positive"));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::config(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        Ok(())
    }
}

/// Pre-norm block: `z + attn(ln(z))`, then `z + ffn(ln(z))`.
#[derive(Clone)]
pub struct EncoderLayer<T: Scalar> {
    pub norm1: LayerNorm<T>,
    pub attn: MultiHeadAttention<T>,
    pub norm2: LayerNorm<T>,
    pub ffn: FeedForward<T>,
    pub dropout: f64,
}

impl<T: Scalar> EncoderLayer<T> {
    pub fn new(cfg: &BackboneConfig, rng: &mut Rng) -> Result<Self> {
        Ok(EncoderLayer {
            norm1: LayerNorm::new(cfg.d_model),
            attn: MultiHeadAttention::new(cfg.d_model, cfg.heads, rng)?,
            norm2: LayerNorm::new(cfg.d_model),
            ffn: FeedForward::new(cfg.d_model, cfg.d_model * cfg.ffn_mult, rng),
            dropout: cfg.dropout,
        })
    }

    /// Returns the block output and its `[batch, heads, n, n]` attention weights.
    pub fn forward(&self, z: &Tensor<T>, ctx: &mut ForwardCtx<'_>) -> Result<(Tensor<T>, Tensor<T>)> {
        let (attended, weights) = self.attn.forward(&self.norm1.forward(z)?, None, ctx, self.dropout)?;
        let z = z.add(&ctx.dropout(&attended, self.dropout))?;
        let ff = self.ffn.forward(&self.norm2.forward(&z)?)?;
        let z = z.add(&ctx.dropout(&ff, self.dropout))?;
        Ok((z, weights))
    }
}

impl<T: Scalar> Module<T> for EncoderLayer<T> {
    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor<T>)) {
        self.norm1.visit_params(&join(prefix, "norm1"), f);
        self.attn.visit_params(&join(prefix, "attn"), f);
        self.norm2.visit_params(&join(prefix, "norm2"), f);
        self.ffn.visit_params(&join(prefix, "ffn"), f);
    }
}

#[derive(Clone)]
pub struct Backbone<T: Scalar> {
    pub cfg: BackboneConfig,
    pub n_patches: usize,
    pub patch_len: usize,
    /// `[patch_len, d_model]`
    pub w_t: Tensor<T>,
    /// `[n_patches, d_model]`, one learned vector per patch position.
    pub e_pos: Tensor<T>,
    pub layers: Vec<EncoderLayer<T>>,
}

/// Output of a layer range plus the attention weights of each layer run.
pub struct LayerTrace<T: Scalar> {
    pub output: Tensor<T>,
    pub attention: Vec<Tensor<T>>,
}

impl<T: Scalar> Backbone<T> {
    pub fn new(cfg: BackboneConfig, patch_len: usize, n_patches: usize, rng: &mut Rng) -> Result<Self> {
        cfg.validate()?;
        Self::with_layers(cfg, patch_len, n_patches, cfg.layers, rng)
    }

    /// Builds only the first `layers` blocks (used when the upper stack is unused).
    pub(crate) fn with_layers(
        cfg: BackboneConfig,
        patch_len: usize,
        n_patches: usize,
        layers: usize,
        rng: &mut Rng,
    ) -> Result<Self> {
        let w_t = init::trunc_normal(&[patch_len, cfg.d_model], INIT_STD, rng);
        let e_pos = init::trunc_normal(&[n_patches, cfg.d_model], INIT_STD, rng);
        let layers = (0..layers)
            .map(|_| EncoderLayer::new(&cfg, rng))
            .collect::<Result<Vec<_>>>()?;
        Ok(Backbone {
            cfg,
            n_patches,
            patch_len,
            w_t,
            e_pos,
            layers,
        })
    }

    /// `Z = X W_t + E_pos` for `x: [batch, n_patches, patch_len]`.
    pub fn embed_patches(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        match x.shape() {
            &[_, n, t] if n == self.n_patches && t == self.patch_len => {}
            s => {
                return Err(Error::config(format!(
                    "patch input {s:?} does not match [_, {}, {}]",
                    self.n_patches, self.patch_len
                )))
            }
        }
        x.matmul(&self.w_t)?.add(&self.e_pos)
    }

    pub fn run_layers(
        &self,
        z: &Tensor<T>,
        range: std::ops::Range<usize>,
        ctx: &mut ForwardCtx<'_>,
    ) -> Result<LayerTrace<T>> {
        let mut output = z.clone();
        let mut attention = Vec::with_capacity(range.len());
        for layer in &self.layers[range] {
            let (next, w) = layer.forward(&output, ctx)?;
            output = next;
            attention.push(w);
        }
        Ok(LayerTrace { output, attention })
    }

    /// Embedding followed by layers `1..=fusion_after_layer`.
    pub fn forward_lower(&self, x: &Tensor<T>, ctx: &mut ForwardCtx<'_>) -> Result<Tensor<T>> {
        Ok(self.trace_lower(x, ctx)?.output)
    }

    pub fn trace_lower(&self, x: &Tensor<T>, ctx: &mut ForwardCtx<'_>) -> Result<LayerTrace<T>> {
        let z = self.embed_patches(x)?;
        self.run_layers(&z, 0..self.cfg.fusion_after_layer, ctx)
    }

    /// Layers `fusion_after_layer+1..=L` on a (possibly fused) intermediate.
    pub fn forward_upper(&self, z: &Tensor<T>, ctx: &mut ForwardCtx<'_>) -> Result<Tensor<T>> {
        Ok(self.trace_upper(z, ctx)?.output)
    }

    pub fn trace_upper(&self, z: &Tensor<T>, ctx: &mut ForwardCtx<'_>) -> Result<LayerTrace<T>> {
        self.run_layers(z, self.cfg.fusion_after_layer..self.layers.len(), ctx)
    }
}

impl<T: Scalar> Module<T> for Backbone<T> {
    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor<T>)) {
        f(join(prefix, "w_t"), &self.w_t);
        f(join(prefix, "e_pos"), &self.e_pos);
        for (i, layer) in self.layers.iter().enumerate() {
            layer.visit_params(&join(prefix, &format!("layers.{i}")), f);
        }
    }
}

/// Flattens `[batch, n, d]` row-major and projects to the horizon.
#[derive(Clone)]
pub struct ForecastHead<T: Scalar> {
    pub proj: Linear<T>,
}

impl<T: Scalar> ForecastHead<T> {
    pub fn new(n_tokens: usize, dim: usize, horizon: usize, rng: &mut Rng) -> Self {
        ForecastHead {
            proj: Linear::new(n_tokens * dim, horizon, true, rng),
        }
    }

    pub fn horizon(&self) -> usize {
        self.proj.out_dim()
    }

    pub fn forward(&self, z: &Tensor<T>) -> Result<Tensor<T>> {
        let &[b, n, d] = z.shape() else {
            return Err(Error::contract(format!("head expects [batch, n, d], got {:?}", z.shape())));
        };
        self.proj.forward(&z.reshape(&[b, n * d])?)
    }
}

impl<T: Scalar> Module<T> for ForecastHead<T> {
    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor<T>)) {
        self.proj.visit_params(prefix, f);
    }
}

/// Mean squared error over the horizon, averaged over any batch rows.
pub fn mse_loss<T: Scalar>(pred: &Tensor<T>, target: &Tensor<T>) -> Result<Tensor<T>> {
    crate::numerics::mse(pred, target)
}
