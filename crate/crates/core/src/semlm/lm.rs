//! GPT-2-style decoder: learned token and position tables, pre-norm causal
//! blocks with a GELU MLP, and a final layer norm.
//!
//! Weight names follow the GPT-2 checkpoint layout:
//!
//! | name | shape |
//! |---|---|
//! | `wte.weight` | `[vocab, d]` |
//! | `wpe.weight` | `[max_positions, d]` |
//! | `h.{i}.ln_1.weight`, `h.{i}.ln_1.bias` | `[d]` |
//! | `h.{i}.attn.c_attn.weight` / `.bias` | `[d, 3d]` / `[3d]` |
//! | `h.{i}.attn.c_proj.weight` / `.bias` | `[d, d]` / `[d]` |
//! | `h.{i}.ln_2.weight`, `h.{i}.ln_2.bias` | `[d]` |
//! | `h.{i}.mlp.c_fc.weight` / `.bias` | `[d, 4d]` / `[4d]` |
//! | `h.{i}.mlp.c_proj.weight` / `.bias` | `[4d, d]` / `[d]` |
//! | `ln_f.weight`, `ln_f.bias` | `[d]` |
//!
//! Matrices are stored `[in, out]` so `y = x W + b` with no transpose. The
//! fused `c_attn` columns are `[q | k | v]`; they are split on load and
//! re-fused on save. Only the first `lm_layers` blocks of a deeper
//! checkpoint are read.

use serde::{Deserialize, Serialize};

use super::manifest::WeightManifest;
use super::LoraAdapter;
use crate::error::{Error, Result};
use crate::nn::{join, FeedForward, ForwardCtx, LayerNorm, Linear, Module, MultiHeadAttention, Rng, INIT_STD};
use crate::numerics::{init, Mask, Scalar, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LmConfig {
    pub d_lm: usize,
    pub lm_layers: usize,
    pub lm_heads: usize,
    pub vocab_size: usize,
    pub max_positions: usize,
    pub lora_rank: usize,
    pub lora_alpha: f64,
    pub dropout: f64,
}

impl Default for LmConfig {
    fn default() -> Self {
        LmConfig {
            d_lm: 768,
            lm_layers: 2,
            lm_heads: 12,
            vocab_size: 50257,
            max_positions: 1024,
            lora_rank: 8,
            lora_alpha: 16.0,
            dropout: 0.1,
        }
    }
}

impl LmConfig {
    /// A small random-init model for tests and desk-scale runs.
    pub fn tiny(d_lm: usize, lm_layers: usize, lm_heads: usize, vocab_size: usize) -> Self {
        LmConfig {
            d_lm,
            lm_layers,
            lm_heads,
            vocab_size,
            max_positions: 512,
            lora_rank: 4.min(d_lm.saturating_sub(1)).max(1),
            lora_alpha: 8.0,
            dropout: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.d_lm == 0 || self.lm_heads == 0 || !self.d_lm.is_multiple_of(self.lm_heads) {
            return Err(Error::config(format!(
                "d_lm {} must be a positive multiple of lm_heads {}",
                self.d_lm, self.lm_heads
            )));
        }
        if self.lm_layers == 0 || self.vocab_size == 0 || self.max_positions == 0 {
            return Err(Error::config("lm_layers, vocab_size and max_positions must be positive"));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::config(format!("LM dropout {} outside [0, 1)", self.dropout)));
        }
        Ok(())
    }
}

#[derive(Clone)]
pub struct LmBlock<T: Scalar> {
    pub ln_1: LayerNorm<T>,
    pub attn: MultiHeadAttention<T>,
    pub ln_2: LayerNorm<T>,
    pub mlp: FeedForward<T>,
}

impl<T: Scalar> LmBlock<T> {
    fn new(cfg: &LmConfig, rng: &mut Rng) -> Result<Self> {
        Ok(LmBlock {
            ln_1: LayerNorm::new(cfg.d_lm),
            attn: MultiHeadAttention::new(cfg.d_lm, cfg.lm_heads, rng)?,
            ln_2: LayerNorm::new(cfg.d_lm),
            mlp: FeedForward::new(cfg.d_lm, 4 * cfg.d_lm, rng),
        })
    }

    fn forward(
        &self,
        x: &Tensor<T>,
        mask: &Mask,
        dropout: f64,
        ctx: &mut ForwardCtx<'_>,
    ) -> Result<(Tensor<T>, Tensor<T>)> {
        let (a, w) = self.attn.forward(&self.ln_1.forward(x)?, Some(mask), ctx, dropout)?;
        let x = x.add(&ctx.dropout(&a, dropout))?;
        let m = self.mlp.forward(&self.ln_2.forward(&x)?)?;
        Ok((x.add(&ctx.dropout(&m, dropout))?, w))
    }

    fn base_linears(&self) -> [&Linear<T>; 6] {
        [
            &self.attn.query,
            &self.attn.key,
            &self.attn.value,
            &self.attn.out,
            &self.mlp.fc_in,
            &self.mlp.fc_out,
        ]
    }
}

impl<T: Scalar> Module<T> for LmBlock<T> {
    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor<T>)) {
        self.ln_1.visit_params(&join(prefix, "ln_1"), f);
        self.attn.visit_params(&join(prefix, "attn"), f);
        self.ln_2.visit_params(&join(prefix, "ln_2"), f);
        self.mlp.visit_params(&join(prefix, "mlp"), f);
    }
}

/// Hidden states plus each block's `[batch, heads, len, len]` attention.
pub struct LmOutput<T: Scalar> {
    pub hidden: Tensor<T>,
    pub attention: Vec<Tensor<T>>,
}

#[derive(Clone)]
pub struct LanguageModel<T: Scalar> {
    pub cfg: LmConfig,
    pub wte: Tensor<T>,
    pub wpe: Tensor<T>,
    pub blocks: Vec<LmBlock<T>>,
    pub ln_f: LayerNorm<T>,
}

impl<T: Scalar> LanguageModel<T> {
    pub fn random(cfg: LmConfig, rng: &mut Rng) -> Result<Self> {
        cfg.validate()?;
        let wte = init::trunc_normal(&[cfg.vocab_size, cfg.d_lm], INIT_STD, rng);
        let wpe = init::trunc_normal(&[cfg.max_positions, cfg.d_lm], INIT_STD / 2.0, rng);
        let blocks = (0..cfg.lm_layers)
            .map(|_| LmBlock::new(&cfg, rng))
            .collect::<Result<Vec<_>>>()?;
        Ok(LanguageModel {
            cfg,
            wte,
            wpe,
            blocks,
            ln_f: LayerNorm::new(cfg.d_lm),
        })
    }

    /// Builds the architecture from `cfg` and fills it from a manifest.
    pub fn from_manifest(cfg: LmConfig, manifest: &WeightManifest, rng: &mut Rng) -> Result<Self> {
        let lm = Self::random(cfg, rng)?;
        let d = cfg.d_lm;
        manifest.load_into("wte.weight", &lm.wte)?;
        manifest.load_into("wpe.weight", &lm.wpe)?;
        for (i, b) in lm.blocks.iter().enumerate() {
            let p = format!("h.{i}");
            manifest.load_into(&format!("{p}.ln_1.weight"), &b.ln_1.gain)?;
            manifest.load_into(&format!("{p}.ln_1.bias"), &b.ln_1.bias)?;
            let w = manifest.require(&format!("{p}.attn.c_attn.weight"), &[d, 3 * d])?;
            let bias = manifest.require(&format!("{p}.attn.c_attn.bias"), &[3 * d])?;
            for (k, lin) in [&b.attn.query, &b.attn.key, &b.attn.value].into_iter().enumerate() {
                let mut wd = lin.weight.data_mut();
                for r in 0..d {
                    for c in 0..d {
                        wd[r * d + c] = T::c(f64::from(w[r * 3 * d + k * d + c]));
                    }
                }
                let mut bd = lin.bias.as_ref().expect("attention projections carry a bias").data_mut();
                for c in 0..d {
                    bd[c] = T::c(f64::from(bias[k * d + c]));
                }
            }
            load_linear(manifest, &format!("{p}.attn.c_proj"), &b.attn.out)?;
            manifest.load_into(&format!("{p}.ln_2.weight"), &b.ln_2.gain)?;
            manifest.load_into(&format!("{p}.ln_2.bias"), &b.ln_2.bias)?;
            load_linear(manifest, &format!("{p}.mlp.c_fc"), &b.mlp.fc_in)?;
            load_linear(manifest, &format!("{p}.mlp.c_proj"), &b.mlp.fc_out)?;
        }
        manifest.load_into("ln_f.weight", &lm.ln_f.gain)?;
        manifest.load_into("ln_f.bias", &lm.ln_f.bias)?;
        Ok(lm)
    }

    /// Exports base weights (adapters merged in) under the GPT-2 names.
    pub fn to_manifest(&self) -> Result<WeightManifest> {
        let d = self.cfg.d_lm;
        let mut m = WeightManifest::new();
        m.insert_tensor("wte.weight", &self.wte)?;
        m.insert_tensor("wpe.weight", &self.wpe)?;
        for (i, b) in self.blocks.iter().enumerate() {
            let p = format!("h.{i}");
            m.insert_tensor(format!("{p}.ln_1.weight"), &b.ln_1.gain)?;
            m.insert_tensor(format!("{p}.ln_1.bias"), &b.ln_1.bias)?;
            let parts = [b.attn.query.merged()?, b.attn.key.merged()?, b.attn.value.merged()?];
            let mut w = vec![0f32; d * 3 * d];
            let mut bias = vec![0f32; 3 * d];
            for (k, lin) in parts.iter().enumerate() {
                let wd = lin.weight.to_f64_vec();
                for r in 0..d {
                    for c in 0..d {
                        w[r * 3 * d + k * d + c] = wd[r * d + c] as f32;
                    }
                }
                if let Some(bt) = &lin.bias {
                    for (c, v) in bt.to_f64_vec().into_iter().enumerate() {
                        bias[k * d + c] = v as f32;
                    }
                }
            }
            m.insert(format!("{p}.attn.c_attn.weight"), &[d, 3 * d], w)?;
            m.insert(format!("{p}.attn.c_attn.bias"), &[3 * d], bias)?;
            save_linear(&mut m, &format!("{p}.attn.c_proj"), &b.attn.out)?;
            m.insert_tensor(format!("{p}.ln_2.weight"), &b.ln_2.gain)?;
            m.insert_tensor(format!("{p}.ln_2.bias"), &b.ln_2.bias)?;
            save_linear(&mut m, &format!("{p}.mlp.c_fc"), &b.mlp.fc_in)?;
            save_linear(&mut m, &format!("{p}.mlp.c_proj"), &b.mlp.fc_out)?;
        }
        m.insert_tensor("ln_f.weight", &self.ln_f.gain)?;
        m.insert_tensor("ln_f.bias", &self.ln_f.bias)?;
        Ok(m)
    }

    pub fn d_lm(&self) -> usize {
        self.cfg.d_lm
    }

    /// Token-table rows for `ids`, shape `[len, d_lm]`.
    pub fn embed_tokens(&self, ids: &[u32]) -> Result<Tensor<T>> {
        let rows: Vec<usize> = ids.iter().map(|&i| i as usize).collect();
        self.wte.index_rows(&rows)
    }

    /// Causal forward over already-embedded inputs `[batch, len, d_lm]`;
    /// position embeddings are added here.
    pub fn forward(&self, x: &Tensor<T>, ctx: &mut ForwardCtx<'_>) -> Result<LmOutput<T>> {
        let &[_, len, d] = x.shape() else {
            return Err(Error::contract(format!("LM expects [batch, len, d_lm], got {:?}", x.shape())));
        };
        if d != self.cfg.d_lm {
            return Err(Error::Dimension {
                op: "lm_forward",
                left: x.shape().to_vec(),
                right: vec![self.cfg.d_lm],
            });
        }
        if len > self.cfg.max_positions {
            return Err(Error::Capacity {
                len,
                max: self.cfg.max_positions,
            });
        }
        let mask = Mask::causal(len);
        let mut h = ctx.dropout(&x.add(&self.wpe.narrow(0, 0, len)?)?, self.cfg.dropout);
        let mut attention = Vec::with_capacity(self.blocks.len());
        for block in &self.blocks {
            let (next, w) = block.forward(&h, &mask, self.cfg.dropout, ctx)?;
            h = next;
            attention.push(w);
        }
        Ok(LmOutput {
            hidden: self.ln_f.forward(&h)?,
            attention,
        })
    }

    pub fn set_base_trainable(&self, on: bool) {
        self.wte.set_requires_grad(on);
        self.wpe.set_requires_grad(on);
        self.ln_f.set_requires_grad(on);
        for b in &self.blocks {
            b.ln_1.set_requires_grad(on);
            b.ln_2.set_requires_grad(on);
            for lin in b.base_linears() {
                lin.set_requires_grad(on);
            }
        }
    }

    /// Freezes every base weight and attaches zero-initialised adapters to
    /// the query and value projections of each block.
    pub fn lora_attach(&mut self, rank: usize, alpha: f64, rng: &mut Rng) -> Result<()> {
        self.set_base_trainable(false);
        let d = self.cfg.d_lm;
        for b in &mut self.blocks {
            b.attn.query.lora = Some(LoraAdapter::new(d, d, rank, alpha, rng)?);
            b.attn.value.lora = Some(LoraAdapter::new(d, d, rank, alpha, rng)?);
        }
        Ok(())
    }

    pub fn has_lora(&self) -> bool {
        self.blocks.iter().any(|b| b.attn.query.lora.is_some() || b.attn.value.lora.is_some())
    }

    /// Same model with every adapter folded into its base weight.
    pub fn merged(&self) -> Result<Self> {
        let mut out = self.clone();
        for b in &mut out.blocks {
            b.attn.query = b.attn.query.merged()?;
            b.attn.value = b.attn.value.merged()?;
        }
        Ok(out)
    }
}

fn load_linear<T: Scalar>(m: &WeightManifest, prefix: &str, lin: &Linear<T>) -> Result<()> {
    m.load_into(&format!("{prefix}.weight"), &lin.weight)?;
    if let Some(b) = &lin.bias {
        m.load_into(&format!("{prefix}.bias"), b)?;
    }
    Ok(())
}

fn save_linear<T: Scalar>(m: &mut WeightManifest, prefix: &str, lin: &Linear<T>) -> Result<()> {
    m.insert_tensor(format!("{prefix}.weight"), &lin.weight)?;
    if let Some(b) = &lin.bias {
        m.insert_tensor(format!("{prefix}.bias"), b)?;
    }
    Ok(())
}

impl<T: Scalar> Module<T> for LanguageModel<T> {
    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor<T>)) {
        f(join(prefix, "wte.weight"), &self.wte);
        f(join(prefix, "wpe.weight"), &self.wpe);
        for (i, b) in self.blocks.iter().enumerate() {
            b.visit_params(&join(prefix, &format!("h.{i}")), f);
        }
        self.ln_f.visit_params(&join(prefix, "ln_f"), f);
    }
}
