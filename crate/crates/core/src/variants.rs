//! The five model wirings built from the shared parts.
//!
//! | kind | wiring |
//! |---|---|
//! | `fused` | backbone lower → LM branch → gated fusion → backbone upper → head |
//! | `trans_only` | backbone (all layers) → head |
//! | `llm_only` | patch projection → LM (prompts off by default) → head |
//! | `trans_llm_add` | as `fused`, but `Z_LLM′ + Z` in place of the gate |
//! | `llm_decoder` | backbone lower → LM with placeholder slots → per-slot linear |
//!
//! Every variant maps a batch of raw histories to horizon predictions.
//! Each history is instance-normalized before patching and the output is
//! mapped back with the same statistics.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::backbone::{Backbone, BackboneConfig, ForecastHead};
use crate::data::{revin_normalize, RevinStats};
use crate::error::{Error, Result};
use crate::fusion::{AdditiveFusion, FusionOutput, GateMode, GatedFusion};
use crate::nn::{join, ForwardCtx, Linear, Module, Rng, INIT_STD};
use crate::numerics::{init, Scalar, Tensor};
use crate::patching::{patchify, PatchConfig};
use crate::semlm::{extract_block, LanguageModel, LmConfig, PromptBlocks, SemanticBundle, SemanticEncoder, Tokenizer};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VariantKind {
    Fused,
    TransOnly,
    LlmOnly,
    TransLlmAdd,
    LlmDecoder,
}

impl VariantKind {
    pub const ALL: [VariantKind; 5] = [
        VariantKind::Fused,
        VariantKind::TransOnly,
        VariantKind::LlmOnly,
        VariantKind::TransLlmAdd,
        VariantKind::LlmDecoder,
    ];

    pub fn name(self) -> &'static str {
        match self {
            VariantKind::Fused => "fused",
            VariantKind::TransOnly => "trans_only",
            VariantKind::LlmOnly => "llm_only",
            VariantKind::TransLlmAdd => "trans_llm_add",
            VariantKind::LlmDecoder => "llm_decoder",
        }
    }

    pub fn uses_backbone(self) -> bool {
        self != VariantKind::LlmOnly
    }

    pub fn uses_lm(self) -> bool {
        self != VariantKind::TransOnly
    }
}

impl fmt::Display for VariantKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for VariantKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        VariantKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::config(format!("unknown variant {s:?}")))
    }
}

/// Everything needed to build a model of any variant.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub lookback: usize,
    pub horizon: usize,
    pub patch: PatchConfig,
    pub backbone: BackboneConfig,
    pub lm: LmConfig,
    pub gate_mode: GateMode,
    /// Fixed gate value in place of the learned one.
    pub gate_override: Option<f64>,
    /// Prompt blocks for the LM-only variant.
    pub llm_only_prompts: bool,
    pub trainable_prompts: bool,
    /// One learned vector per placeholder slot instead of a shared one.
    pub per_slot_placeholders: bool,
    pub revin: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            lookback: 336,
            horizon: 96,
            patch: PatchConfig {
                patch_len: 16,
                stride: 8,
            },
            backbone: BackboneConfig::default(),
            lm: LmConfig::default(),
            gate_mode: GateMode::Vector,
            gate_override: None,
            llm_only_prompts: false,
            trainable_prompts: false,
            per_slot_placeholders: false,
            revin: true,
        }
    }
}

impl ModelConfig {
    pub fn n_patches(&self) -> Result<usize> {
        self.patch.patches_for(self.lookback)
    }

    /// Placeholder slots for the decoder variant: `ceil(horizon / patch_len)`.
    pub fn decoder_slots(&self) -> usize {
        self.horizon.div_ceil(self.patch.patch_len)
    }

    pub fn validate(&self, kind: VariantKind) -> Result<()> {
        if self.horizon == 0 {
            return Err(Error::config("horizon must be positive"));
        }
        self.n_patches()?;
        if kind.uses_backbone() {
            self.backbone.validate()?;
        }
        if kind.uses_lm() {
            self.lm.validate()?;
        }
        if let Some(g) = self.gate_override {
            if !(0.0..=1.0).contains(&g) {
                return Err(Error::config(format!("gate override {g} outside [0, 1]")));
            }
        }
        Ok(())
    }
}

#[derive(Clone)]
pub enum Fusion<T: Scalar> {
    Gated(GatedFusion<T>),
    Additive(AdditiveFusion<T>),
}

impl<T: Scalar> Fusion<T> {
    pub fn forward(&self, z_llm: &Tensor<T>, z: &Tensor<T>) -> Result<FusionOutput<T>> {
        match self {
            Fusion::Gated(f) => f.forward(z_llm, z),
            Fusion::Additive(f) => f.forward(z_llm, z),
        }
    }
}

impl<T: Scalar> Module<T> for Fusion<T> {
    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor<T>)) {
        match self {
            Fusion::Gated(g) => g.visit_params(prefix, f),
            Fusion::Additive(a) => a.visit_params(prefix, f),
        }
    }
}

/// Placeholder slots and their per-slot `d_lm → patch_len` projections.
#[derive(Clone)]
pub struct PlaceholderDecoder<T: Scalar> {
    /// `[1, d_lm]` shared or `[slots, d_lm]` per slot.
    pub placeholders: Tensor<T>,
    pub slot_heads: Vec<Linear<T>>,
    pub horizon: usize,
}

impl<T: Scalar> PlaceholderDecoder<T> {
    fn new(slots: usize, d_lm: usize, patch_len: usize, horizon: usize, per_slot: bool, rng: &mut Rng) -> Self {
        let rows = if per_slot { slots } else { 1 };
        PlaceholderDecoder {
            placeholders: init::trunc_normal(&[rows, d_lm], INIT_STD, rng),
            slot_heads: (0..slots).map(|_| Linear::new(d_lm, patch_len, true, rng)).collect(),
            horizon,
        }
    }

    pub fn slots(&self) -> usize {
        self.slot_heads.len()
    }

    fn tail(&self, batch: usize) -> Result<Tensor<T>> {
        let &[rows, d] = self.placeholders.shape() else { unreachable!() };
        let n = self.slots();
        if rows == n {
            self.placeholders.reshape(&[1, n, d])?.broadcast_to(&[batch, n, d])
        } else {
            self.placeholders.reshape(&[1, 1, d])?.broadcast_to(&[batch, n, d])
        }
    }

    /// `[batch, slots, d_lm]` outputs → `[batch, horizon]`.
    fn project(&self, outputs: &Tensor<T>) -> Result<Tensor<T>> {
        let b = outputs.shape()[0];
        let pieces = self
            .slot_heads
            .iter()
            .enumerate()
            .map(|(s, head)| head.forward(&outputs.narrow(1, s, 1)?))
            .collect::<Result<Vec<_>>>()?;
        let refs: Vec<&Tensor<T>> = pieces.iter().collect();
        let joined = Tensor::concat(&refs, 1)?;
        let total = joined.numel() / b;
        joined.reshape(&[b, total])?.narrow(1, 0, self.horizon)
    }
}

impl<T: Scalar> Module<T> for PlaceholderDecoder<T> {
    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor<T>)) {
        f(join(prefix, "placeholders"), &self.placeholders);
        for (i, h) in self.slot_heads.iter().enumerate() {
            h.visit_params(&join(prefix, &format!("slot_heads.{i}")), f);
        }
    }
}

/// Intermediate values of one forward pass, for exports and tests.
pub struct ForwardTrace<T: Scalar> {
    /// `[batch, N, patch_len]` after instance normalization.
    pub patches: Tensor<T>,
    pub revin: Vec<RevinStats>,
    /// Backbone output just before fusion (`Z^{l-1}`).
    pub z_lower: Option<Tensor<T>>,
    pub semantic: Option<SemanticBundle<T>>,
    pub fusion: Option<FusionOutput<T>>,
    /// Attention of every backbone layer that ran, in order.
    pub backbone_attention: Vec<Tensor<T>>,
    /// Normalized-space output before the inverse instance transform.
    pub raw_output: Tensor<T>,
    /// `[batch, horizon]` in the input's units.
    pub prediction: Tensor<T>,
}

#[derive(Clone)]
pub struct HybridModel<T: Scalar> {
    pub kind: VariantKind,
    pub cfg: ModelConfig,
    pub n_patches: usize,
    pub backbone: Option<Backbone<T>>,
    pub semantic: Option<SemanticEncoder<T>>,
    pub fusion: Option<Fusion<T>>,
    pub head: Option<ForecastHead<T>>,
    pub decoder: Option<PlaceholderDecoder<T>>,
}

impl<T: Scalar> HybridModel<T> {
    /// Builds `kind` with a random-init LM, or from `lm` if supplied.
    pub fn build(
        kind: VariantKind,
        cfg: ModelConfig,
        tokenizer: &Tokenizer,
        lm: Option<LanguageModel<T>>,
        rng: &mut Rng,
    ) -> Result<Self> {
        cfg.validate(kind)?;
        let n = cfg.n_patches()?;
        let t = cfg.patch.patch_len;
        let d = cfg.backbone.d_model;
        let backbone = match kind {
            VariantKind::LlmOnly => None,
            VariantKind::LlmDecoder => Some(Backbone::with_layers(
                cfg.backbone,
                t,
                n,
                cfg.backbone.fusion_after_layer,
                rng,
            )?),
            _ => Some(Backbone::new(cfg.backbone, t, n, rng)?),
        };
        let semantic = if kind.uses_lm() {
            let mut lm = match lm {
                Some(lm) => lm,
                None => LanguageModel::random(cfg.lm, rng)?,
            };
            if lm.cfg != cfg.lm {
                return Err(Error::config("supplied LM does not match the configured LM shape"));
            }
            if cfg.lm.lora_rank > 0 {
                lm.lora_attach(cfg.lm.lora_rank, cfg.lm.lora_alpha, rng)?;
            } else {
                lm.set_base_trainable(false);
            }
            let with_prompts = kind != VariantKind::LlmOnly || cfg.llm_only_prompts;
            let prompts = with_prompts
                .then(|| PromptBlocks::embed(tokenizer, &lm, cfg.trainable_prompts))
                .transpose()?;
            let d_model = kind.uses_backbone().then_some(d);
            Some(SemanticEncoder::new(lm, d_model, t, prompts, rng))
        } else {
            None
        };
        let fusion = match kind {
            VariantKind::Fused => {
                let mut g = GatedFusion::new(cfg.lm.d_lm, d, cfg.gate_mode, rng);
                g.gate_override = cfg.gate_override;
                Some(Fusion::Gated(g))
            }
            VariantKind::TransLlmAdd => Some(Fusion::Additive(AdditiveFusion::new(cfg.lm.d_lm, d, rng))),
            _ => None,
        };
        let head = match kind {
            VariantKind::LlmDecoder => None,
            VariantKind::LlmOnly => Some(ForecastHead::new(n, cfg.lm.d_lm, cfg.horizon, rng)),
            _ => Some(ForecastHead::new(n, d, cfg.horizon, rng)),
        };
        let decoder = (kind == VariantKind::LlmDecoder).then(|| {
            PlaceholderDecoder::new(
                cfg.decoder_slots(),
                cfg.lm.d_lm,
                t,
                cfg.horizon,
                cfg.per_slot_placeholders,
                rng,
            )
        });
        Ok(HybridModel {
            kind,
            cfg,
            n_patches: n,
            backbone,
            semantic,
            fusion,
            head,
            decoder,
        })
    }

    /// A model of another kind sharing this model's parameter tensors.
    ///
    /// `fused → trans_only` keeps backbone and head; `fused → trans_llm_add`
    /// also keeps the LM branch and alignment map, dropping the gate.
    pub fn rewire(&self, kind: VariantKind) -> Result<Self> {
        let mut out = self.clone();
        out.kind = kind;
        match (self.kind, kind, &self.fusion) {
            (VariantKind::Fused, VariantKind::TransOnly, _) => {
                out.semantic = None;
                out.fusion = None;
            }
            (VariantKind::Fused, VariantKind::TransLlmAdd, Some(Fusion::Gated(g))) => {
                out.fusion = Some(Fusion::Additive(AdditiveFusion { align: g.align.clone() }));
            }
            (a, b, _) if a == b => {}
            (a, b, _) => return Err(Error::config(format!("cannot rewire {a} as {b}"))),
        }
        Ok(out)
    }

    pub fn set_gate_override(&mut self, g: Option<f64>) -> Result<()> {
        match &mut self.fusion {
            Some(Fusion::Gated(f)) => {
                f.gate_override = g;
                Ok(())
            }
            _ => Err(Error::Capability {
                variant: self.kind.to_string(),
                component: "gate",
            }),
        }
    }

    /// Instance-normalizes and patches each history into `[batch, N, T]`.
    pub fn prepare(&self, histories: &[&[f64]]) -> Result<(Tensor<T>, Vec<RevinStats>)> {
        let (n, t) = (self.n_patches, self.cfg.patch.patch_len);
        let mut data = Vec::with_capacity(histories.len() * n * t);
        let mut stats = Vec::with_capacity(histories.len());
        for h in histories {
            if h.len() != self.cfg.lookback {
                return Err(Error::contract(format!(
                    "history of length {} for lookback {}",
                    h.len(),
                    self.cfg.lookback
                )));
            }
            let (normed, s) = if self.cfg.revin {
                revin_normalize(h)
            } else {
                (
                    h.to_vec(),
                    RevinStats {
                        mean: 0.0,
                        std: 1.0,
                        eps: 0.0,
                    },
                )
            };
            let p = patchify(&normed, self.cfg.patch)?;
            data.extend(p.patches.iter().map(|&v| T::c(v)));
            stats.push(s);
        }
        Ok((Tensor::new(data, &[histories.len(), n, t])?, stats))
    }

    pub fn predict(&self, histories: &[&[f64]], ctx: &mut ForwardCtx<'_>) -> Result<Tensor<T>> {
        Ok(self.forward_traced(histories, ctx)?.prediction)
    }

    pub fn forward_traced(&self, histories: &[&[f64]], ctx: &mut ForwardCtx<'_>) -> Result<ForwardTrace<T>> {
        let (x, revin) = self.prepare(histories)?;
        let mut trace = ForwardTrace {
            patches: x.clone(),
            revin,
            z_lower: None,
            semantic: None,
            fusion: None,
            backbone_attention: Vec::new(),
            raw_output: Tensor::zeros(&[0]),
            prediction: Tensor::zeros(&[0]),
        };
        let raw = match self.kind {
            VariantKind::LlmOnly => {
                let bundle = self.semantic()?.encode(None, &x, None, ctx)?;
                let out = self.head()?.forward(&bundle.z_llm)?;
                trace.semantic = Some(bundle);
                out
            }
            VariantKind::TransOnly => {
                let bb = self.backbone()?;
                let lower = bb.trace_lower(&x, ctx)?;
                let upper = bb.trace_upper(&lower.output, ctx)?;
                trace.backbone_attention = lower.attention.into_iter().chain(upper.attention).collect();
                trace.z_lower = Some(lower.output);
                self.head()?.forward(&upper.output)?
            }
            VariantKind::Fused | VariantKind::TransLlmAdd => {
                let bb = self.backbone()?;
                let lower = bb.trace_lower(&x, ctx)?;
                let bundle = self.semantic()?.encode(Some(&lower.output), &x, None, ctx)?;
                let fused = self
                    .fusion
                    .as_ref()
                    .ok_or_else(|| Error::contract("fusion module missing"))?
                    .forward(&bundle.z_llm, &lower.output)?;
                let upper = bb.trace_upper(&fused.fused, ctx)?;
                trace.backbone_attention = lower.attention.into_iter().chain(upper.attention).collect();
                trace.z_lower = Some(lower.output);
                trace.semantic = Some(bundle);
                trace.fusion = Some(fused);
                self.head()?.forward(&upper.output)?
            }
            VariantKind::LlmDecoder => {
                let bb = self.backbone()?;
                let dec = self.decoder.as_ref().ok_or_else(|| Error::contract("decoder missing"))?;
                let lower = bb.trace_lower(&x, ctx)?;
                let tail = dec.tail(histories.len())?;
                let bundle = self.semantic()?.encode(Some(&lower.output), &x, Some(&tail), ctx)?;
                let slots = extract_block(&bundle.hidden, &bundle.layout, bundle.layout.tail_range())?;
                trace.backbone_attention = lower.attention;
                trace.z_lower = Some(lower.output);
                trace.semantic = Some(bundle);
                dec.project(&slots)?
            }
        };
        trace.prediction = denormalize_batch(&raw, &trace.revin)?;
        trace.raw_output = raw;
        Ok(trace)
    }

    fn backbone(&self) -> Result<&Backbone<T>> {
        self.backbone.as_ref().ok_or_else(|| Error::Capability {
            variant: self.kind.to_string(),
            component: "backbone",
        })
    }

    fn semantic(&self) -> Result<&SemanticEncoder<T>> {
        self.semantic.as_ref().ok_or_else(|| Error::Capability {
            variant: self.kind.to_string(),
            component: "language model",
        })
    }

    fn head(&self) -> Result<&ForecastHead<T>> {
        self.head.as_ref().ok_or_else(|| Error::contract("forecast head missing"))
    }
}

/// `y · scale + mean` per row, with constants outside the graph.
fn denormalize_batch<T: Scalar>(raw: &Tensor<T>, stats: &[RevinStats]) -> Result<Tensor<T>> {
    let b = stats.len();
    let scale = Tensor::new(stats.iter().map(|s| T::c(s.scale())).collect(), &[b, 1])?;
    let mean = Tensor::new(stats.iter().map(|s| T::c(s.mean)).collect(), &[b, 1])?;
    raw.mul(&scale)?.add(&mean)
}

impl<T: Scalar> Module<T> for HybridModel<T> {
    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor<T>)) {
        if let Some(m) = &self.backbone {
            m.visit_params(&join(prefix, "backbone"), f);
        }
        if let Some(m) = &self.semantic {
            m.visit_params(&join(prefix, "semantic"), f);
        }
        if let Some(m) = &self.fusion {
            m.visit_params(&join(prefix, "fusion"), f);
        }
        if let Some(m) = &self.head {
            m.visit_params(&join(prefix, "head"), f);
        }
        if let Some(m) = &self.decoder {
            m.visit_params(&join(prefix, "decoder"), f);
        }
    }
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;

    use super::*;

    fn tiny_cfg(horizon: usize) -> ModelConfig {
        ModelConfig {
            lookback: 24,
            horizon,
            patch: PatchConfig {
                patch_len: 8,
                stride: 4,
            },
            backbone: BackboneConfig {
                d_model: 8,
                heads: 2,
                layers: 3,
                fusion_after_layer: 2,
                ffn_mult: 2,
                dropout: 0.1,
            },
            lm: LmConfig::tiny(16, 1, 2, 256),
            ..Default::default()
        }
    }

    fn history(seed: u64) -> Vec<f64> {
        (0..24).map(|t| ((t as f64 + seed as f64) * 0.4).sin() * 3.0 + 1.0).collect()
    }

    fn build(kind: VariantKind, horizon: usize) -> HybridModel<f64> {
        let mut rng = Rng::seed_from_u64(7);
        HybridModel::build(kind, tiny_cfg(horizon), &Tokenizer::ByteFallback, None, &mut rng).unwrap()
    }

    #[test]
    fn every_variant_outputs_the_horizon() {
        let (h0, h1) = (history(0), history(5));
        for kind in VariantKind::ALL {
            let m = build(kind, 10);
            let out = m.predict(&[&h0, &h1], &mut ForwardCtx::eval()).unwrap();
            assert_eq!(out.shape(), &[2, 10], "{kind}");
            assert!(out.to_vec().iter().all(|v| v.is_finite()));
        }
    }

    #[test]
    fn parameter_sets_follow_the_wiring() {
        let names = |k| build(k, 10).named_params().into_iter().map(|(n, _)| n).collect::<Vec<_>>();
        let trans = names(VariantKind::TransOnly);
        assert!(trans.iter().all(|n| n.starts_with("backbone") || n.starts_with("head")));
        let llm = names(VariantKind::LlmOnly);
        assert!(!llm.iter().any(|n| n.starts_with("backbone")));
        assert!(!llm.iter().any(|n| n.contains("prompts")));
        let add = names(VariantKind::TransLlmAdd);
        assert!(add.iter().any(|n| n == "fusion.align.weight"));
        assert!(!add.iter().any(|n| n.contains("gate")));
        let dec = names(VariantKind::LlmDecoder);
        assert!(!dec.iter().any(|n| n.starts_with("backbone.layers.2")));
        assert!(!dec.iter().any(|n| n.starts_with("head")));
    }

    #[test]
    fn decoder_slot_arithmetic() {
        let mut cfg = tiny_cfg(96);
        cfg.patch.patch_len = 16;
        assert_eq!(cfg.decoder_slots(), 6);
        cfg.horizon = 100;
        assert_eq!(cfg.decoder_slots(), 7);
        let m = build(VariantKind::LlmDecoder, 13);
        assert_eq!(m.decoder.as_ref().unwrap().slots(), 2);
    }

    #[test]
    fn rewired_models_share_weights() {
        let h = history(1);
        let mut fused = build(VariantKind::Fused, 6);
        let trans = fused.rewire(VariantKind::TransOnly).unwrap();
        let add = fused.rewire(VariantKind::TransLlmAdd).unwrap();
        fused.set_gate_override(Some(0.0)).unwrap();
        let a = fused.predict(&[&h], &mut ForwardCtx::eval()).unwrap().to_vec();
        let b = trans.predict(&[&h], &mut ForwardCtx::eval()).unwrap().to_vec();
        assert_eq!(a, b);

        fused.set_gate_override(Some(0.5)).unwrap();
        let half = fused.forward_traced(&[&h], &mut ForwardCtx::eval()).unwrap();
        let full = add.forward_traced(&[&h], &mut ForwardCtx::eval()).unwrap();
        let doubled: Vec<f64> = half.fusion.unwrap().fused.to_vec().iter().map(|v| v * 2.0).collect();
        assert_eq!(doubled, full.fusion.unwrap().fused.to_vec());
        assert!(trans.rewire(VariantKind::Fused).is_err());
    }

    #[test]
    fn gradients_reach_trainable_params_only() {
        let h = history(2);
        let m = build(VariantKind::Fused, 6);
        let target = Tensor::<f64>::zeros(&[1, 6]);
        let pred = m.predict(&[&h], &mut ForwardCtx::eval()).unwrap();
        crate::backbone::mse_loss(&pred, &target).unwrap().backward().unwrap();
        for (name, p) in m.named_params() {
            let frozen = name.starts_with("semantic.lm") || name.contains("prompts");
            let trainable = !frozen || name.contains("lora");
            assert_eq!(p.requires_grad(), trainable, "{name}");
            assert_eq!(p.grad().is_some(), trainable, "{name}");
        }
        assert!(m.semantic.as_ref().unwrap().project_patches.weight.grad().unwrap().iter().any(|&g| g != 0.0));
    }
}
