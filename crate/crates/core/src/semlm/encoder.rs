//! Turns backbone features and raw patches into `Z_LLM`.
//!
//! Both inputs are projected to the LM width, interleaved with the three
//! prompt blocks as `[P_task, P_feat, E_Z, P_data, E_X]`, run through the
//! causal LM, and the outputs at the `E_X` positions are kept.

use std::ops::Range;

use super::lm::{LanguageModel, LmOutput};
use super::tokenizer::{Tokenizer, PROMPTS};
use crate::error::{Error, Result};
use crate::nn::{join, ForwardCtx, Linear, Module, Rng};
use crate::numerics::{Scalar, Tensor};

/// Block lengths of an assembled LM input, in order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct SequenceLayout {
    pub p_task: usize,
    pub p_feat: usize,
    pub n_z: usize,
    pub p_data: usize,
    pub n_x: usize,
    /// Extra slots appended after `E_X` (decoder placeholders).
    pub n_tail: usize,
}

impl SequenceLayout {
    pub fn total(&self) -> usize {
        self.p_task + self.p_feat + self.n_z + self.p_data + self.n_x + self.n_tail
    }

    fn starts(&self) -> [usize; 7] {
        let lens = [self.p_task, self.p_feat, self.n_z, self.p_data, self.n_x, self.n_tail];
        let mut s = [0; 7];
        for i in 0..6 {
            s[i + 1] = s[i] + lens[i];
        }
        s
    }

    pub fn z_range(&self) -> Range<usize> {
        let s = self.starts();
        s[2]..s[3]
    }

    pub fn x_range(&self) -> Range<usize> {
        let s = self.starts();
        s[4]..s[5]
    }

    pub fn tail_range(&self) -> Range<usize> {
        let s = self.starts();
        s[5]..s[6]
    }
}

/// Embedded prompt blocks, each `[len, d_lm]`.
#[derive(Clone)]
pub struct PromptBlocks<T: Scalar> {
    pub task: Tensor<T>,
    pub feat: Tensor<T>,
    pub data: Tensor<T>,
}

impl<T: Scalar> PromptBlocks<T> {
    /// Tokenizes the three prompts and copies their token embeddings.
    pub fn embed(tokenizer: &Tokenizer, lm: &LanguageModel<T>, trainable: bool) -> Result<Self> {
        let mut blocks = Vec::with_capacity(3);
        for text in PROMPTS {
            let ids = tokenizer.encode(text)?;
            if let Some(&bad) = ids.iter().find(|&&i| i as usize >= lm.cfg.vocab_size) {
                return Err(Error::config(format!(
                    "token id {bad} exceeds LM vocabulary of {}",
                    lm.cfg.vocab_size
                )));
            }
            let block = lm.embed_tokens(&ids)?.detach();
            block.set_requires_grad(trainable);
            blocks.push(block);
        }
        let [task, feat, data]: [Tensor<T>; 3] = blocks.try_into().expect("three prompts");
        Ok(PromptBlocks { task, feat, data })
    }

    pub fn lens(&self) -> [usize; 3] {
        [self.task.shape()[0], self.feat.shape()[0], self.data.shape()[0]]
    }
}

/// Concatenates `[P_task, P_feat, E_Z, P_data, E_X, tail]` along the sequence
/// axis. Every block is `[batch, len, d_lm]`; zero-length blocks are allowed.
pub fn assemble_input<T: Scalar>(
    blocks: [&Tensor<T>; 5],
    tail: Option<&Tensor<T>>,
    max_positions: usize,
) -> Result<(Tensor<T>, SequenceLayout)> {
    let all: Vec<&Tensor<T>> = blocks.iter().copied().chain(tail).collect();
    let (b, d) = match all[0].shape() {
        &[b, _, d] => (b, d),
        s => return Err(Error::contract(format!("prompt block must be [batch, len, d], got {s:?}"))),
    };
    for t in &all {
        match t.shape() {
            &[bb, _, dd] if bb == b && dd == d => {}
            s => {
                return Err(Error::Dimension {
                    op: "assemble_input",
                    left: vec![b, 0, d],
                    right: s.to_vec(),
                })
            }
        }
    }
    let len = |t: &Tensor<T>| t.shape()[1];
    let layout = SequenceLayout {
        p_task: len(blocks[0]),
        p_feat: len(blocks[1]),
        n_z: len(blocks[2]),
        p_data: len(blocks[3]),
        n_x: len(blocks[4]),
        n_tail: tail.map_or(0, len),
    };
    if layout.total() > max_positions {
        return Err(Error::Capacity {
            len: layout.total(),
            max: max_positions,
        });
    }
    let parts: Vec<&Tensor<T>> = all.into_iter().filter(|t| len(t) > 0).collect();
    let joined = if parts.is_empty() {
        Tensor::zeros(&[b, 0, d])
    } else {
        Tensor::concat(&parts, 1)?
    };
    Ok((joined, layout))
}

/// The `E_X` rows of the LM output, in patch order.
pub fn extract_zllm<T: Scalar>(hidden: &Tensor<T>, layout: &SequenceLayout) -> Result<Tensor<T>> {
    extract_block(hidden, layout, layout.x_range())
}

pub(crate) fn extract_block<T: Scalar>(
    hidden: &Tensor<T>,
    layout: &SequenceLayout,
    range: Range<usize>,
) -> Result<Tensor<T>> {
    match hidden.shape() {
        &[_, len, _] if len == layout.total() => hidden.narrow(1, range.start, range.len()),
        s => Err(Error::contract(format!(
            "hidden states {s:?} do not match a layout of length {}",
            layout.total()
        ))),
    }
}

/// Intermediate tensors of one semantic-encoder pass.
pub struct SemanticBundle<T: Scalar> {
    pub e_z: Option<Tensor<T>>,
    pub e_x: Tensor<T>,
    pub e_llm: Tensor<T>,
    pub layout: SequenceLayout,
    pub hidden: Tensor<T>,
    pub z_llm: Tensor<T>,
    /// Per-block LM attention, `[batch, heads, len, len]`.
    pub attention: Vec<Tensor<T>>,
}

#[derive(Clone)]
pub struct SemanticEncoder<T: Scalar> {
    pub lm: LanguageModel<T>,
    /// `d_model → d_lm`; absent when no backbone features are fed in.
    pub project_temporal: Option<Linear<T>>,
    /// `patch_len → d_lm`.
    pub project_patches: Linear<T>,
    pub prompts: Option<PromptBlocks<T>>,
}

impl<T: Scalar> SemanticEncoder<T> {
    pub fn new(
        lm: LanguageModel<T>,
        d_model: Option<usize>,
        patch_len: usize,
        prompts: Option<PromptBlocks<T>>,
        rng: &mut Rng,
    ) -> Self {
        let d_lm = lm.d_lm();
        SemanticEncoder {
            project_temporal: d_model.map(|d| Linear::new(d, d_lm, true, rng)),
            project_patches: Linear::new(patch_len, d_lm, true, rng),
            lm,
            prompts,
        }
    }

    /// `E_Z` from `[batch, N, d_model]`.
    pub fn project_temporal(&self, z: &Tensor<T>) -> Result<Tensor<T>> {
        self.project_temporal
            .as_ref()
            .ok_or_else(|| Error::contract("encoder has no temporal projection"))?
            .forward(z)
    }

    /// `E_X` from `[batch, N, patch_len]`.
    pub fn project_patches(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        self.project_patches.forward(x)
    }

    fn prompt_batch(&self, batch: usize) -> Result<[Tensor<T>; 3]> {
        let d = self.lm.d_lm();
        let expand = |p: &Tensor<T>| -> Result<Tensor<T>> {
            let len = p.shape()[0];
            if len == 0 {
                return Ok(Tensor::zeros(&[batch, 0, d]));
            }
            p.reshape(&[1, len, d])?.broadcast_to(&[batch, len, d])
        };
        match &self.prompts {
            Some(p) => Ok([expand(&p.task)?, expand(&p.feat)?, expand(&p.data)?]),
            None => Ok(std::array::from_fn(|_| Tensor::zeros(&[batch, 0, d]))),
        }
    }

    /// Full pass. `z` is the backbone intermediate (omitted for LM-only
    /// models); `tail` holds extra slots appended after `E_X`.
    pub fn encode(
        &self,
        z: Option<&Tensor<T>>,
        x: &Tensor<T>,
        tail: Option<&Tensor<T>>,
        ctx: &mut ForwardCtx<'_>,
    ) -> Result<SemanticBundle<T>> {
        let batch = x.shape()[0];
        let d = self.lm.d_lm();
        let e_x = self.project_patches(x)?;
        let e_z = z.map(|z| self.project_temporal(z)).transpose()?;
        let empty = Tensor::zeros(&[batch, 0, d]);
        let [p_task, p_feat, p_data] = self.prompt_batch(batch)?;
        let (e_llm, layout) = assemble_input(
            [&p_task, &p_feat, e_z.as_ref().unwrap_or(&empty), &p_data, &e_x],
            tail,
            self.lm.cfg.max_positions,
        )?;
        let LmOutput { hidden, attention } = self.lm.forward(&e_llm, ctx)?;
        let z_llm = extract_zllm(&hidden, &layout)?;
        Ok(SemanticBundle {
            e_z,
            e_x,
            e_llm,
            layout,
            hidden,
            z_llm,
            attention,
        })
    }
}

impl<T: Scalar> Module<T> for SemanticEncoder<T> {
    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor<T>)) {
        self.lm.visit_params(&join(prefix, "lm"), f);
        if let Some(p) = &self.project_temporal {
            p.visit_params(&join(prefix, "project_temporal"), f);
        }
        self.project_patches.visit_params(&join(prefix, "project_patches"), f);
        if let Some(p) = &self.prompts {
            f(join(prefix, "prompts.task"), &p.task);
            f(join(prefix, "prompts.feat"), &p.feat);
            f(join(prefix, "prompts.data"), &p.data);
        }
    }
}
