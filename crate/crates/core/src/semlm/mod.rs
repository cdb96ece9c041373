//! The causal language model branch: tokenizer, weights, LoRA and the
//! semantic encoder that turns patch features into `Z_LLM`.

mod encoder;
mod lm;
mod lora;
mod manifest;
mod tokenizer;

pub use encoder::{assemble_input, extract_zllm, PromptBlocks, SemanticBundle, SemanticEncoder, SequenceLayout};
pub(crate) use encoder::extract_block;
pub use lm::{LanguageModel, LmBlock, LmConfig, LmOutput};
pub use lora::LoraAdapter;
pub use manifest::{manifest_paths, ManifestEntry, WeightManifest};
pub use tokenizer::{
    byte_alphabet, parse_merges, pretokenize, BpeTokenizer, Tokenizer, PROMPTS, PROMPT_DATA, PROMPT_FEATURES,
    PROMPT_TASK,
};
