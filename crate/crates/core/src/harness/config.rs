//! Experiment configuration.
//!
//! A TOML document is merged over a preset (chosen by `preset`, or inferred
//! from the dataset name) and then checked strictly: unknown keys fail.

use std::collections::hash_map::DefaultHasher;
use std::hash::{Hash, Hasher};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::backbone::BackboneConfig;
use crate::data::SplitRatios;
use crate::error::{Error, Result};
use crate::patching::PatchConfig;
use crate::semlm::{LanguageModel, Tokenizer, WeightManifest};
use crate::variants::{ModelConfig, VariantKind};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Preset {
    #[default]
    General,
    Ili,
}

impl Preset {
    pub fn for_dataset(name: &str) -> Self {
        let n = name.to_ascii_lowercase();
        if n.starts_with("ili") || n.contains("illness") {
            Preset::Ili
        } else {
            Preset::General
        }
    }

    pub fn model(self) -> ModelConfig {
        match self {
            Preset::General => ModelConfig::default(),
            Preset::Ili => ModelConfig {
                lookback: 104,
                patch: PatchConfig {
                    patch_len: 24,
                    stride: 2,
                },
                backbone: BackboneConfig {
                    d_model: 128,
                    heads: 16,
                    ..BackboneConfig::default()
                },
                ..ModelConfig::default()
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetConfig {
    pub name: String,
    /// Defaults to `data/<name>.csv`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub path: Option<PathBuf>,
    /// `[train, val, test]`; defaults to 6:2:2 for ETT names, else 7:1:2.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub split: Option<[f64; 3]>,
}

impl DatasetConfig {
    pub fn path(&self) -> PathBuf {
        self.path
            .clone()
            .unwrap_or_else(|| PathBuf::from("data").join(format!("{}.csv", self.name)))
    }

    pub fn split_ratios(&self) -> Result<SplitRatios> {
        match self.split {
            Some([a, b, c]) => SplitRatios::new(a, b, c),
            None => Ok(SplitRatios::for_dataset(&self.name)),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum TokenizerConfig {
    /// One id per byte; needs no files.
    #[default]
    Bytes,
    /// BPE fitted to the three prompts with this many merges.
    PromptBpe { merges: usize },
    /// GPT-2 `vocab.json` and `merges.txt`.
    Files { vocab: PathBuf, merges: PathBuf },
}

impl TokenizerConfig {
    pub fn build(&self) -> Result<Tokenizer> {
        match self {
            TokenizerConfig::Bytes => Ok(Tokenizer::ByteFallback),
            TokenizerConfig::PromptBpe { merges } => Tokenizer::prompt_bpe(*merges),
            TokenizerConfig::Files { vocab, merges } => Tokenizer::from_files(vocab, merges),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub preset: Preset,
    pub dataset: DatasetConfig,
    /// `horizon` here is ignored in favour of `horizons`.
    pub model: ModelConfig,
    pub variant: VariantKind,
    /// Variants covered by `run-matrix`.
    pub variants: Vec<VariantKind>,
    pub horizons: Vec<usize>,
    pub seeds: Vec<u64>,
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub deterministic: bool,
    pub out_dir: PathBuf,
    pub tokenizer: TokenizerConfig,
    /// Base path of a GPT-2-style weight manifest (`.json` + `.bin`).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lm_weights: Option<PathBuf>,
    /// Evenly thinned cap on training windows per epoch.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_train_windows: Option<usize>,
    /// Evenly thinned cap on validation and test windows.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_eval_windows: Option<usize>,
    /// Stop after this many epochs without a validation improvement.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub patience: Option<usize>,
}

impl ExperimentConfig {
    pub fn preset(preset: Preset, dataset: &str) -> Self {
        ExperimentConfig {
            preset,
            dataset: DatasetConfig {
                name: dataset.to_string(),
                path: None,
                split: None,
            },
            model: preset.model(),
            variant: VariantKind::Fused,
            variants: vec![
                VariantKind::Fused,
                VariantKind::TransOnly,
                VariantKind::LlmOnly,
                VariantKind::TransLlmAdd,
            ],
            horizons: vec![96, 192, 336, 720],
            seeds: vec![0, 1, 2],
            epochs: 300,
            lr: 1e-4,
            batch_size: 32,
            deterministic: false,
            out_dir: PathBuf::from("runs"),
            tokenizer: TokenizerConfig::Bytes,
            lm_weights: None,
            max_train_windows: None,
            max_eval_windows: None,
            patience: None,
        }
    }

    /// Parses TOML over the preset named (or implied) by the document.
    pub fn from_toml(text: &str) -> Result<Self> {
        let user: toml::Table = toml::from_str(text).map_err(|e| Error::config(e.to_string()))?;
        let dataset = user
            .get("dataset")
            .and_then(|d| d.get("name"))
            .and_then(|n| n.as_str())
            .ok_or_else(|| Error::config("missing dataset.name"))?;
        let preset = match user.get("preset") {
            Some(p) => p
                .clone()
                .try_into::<Preset>()
                .map_err(|e| Error::config(format!("preset: {e}")))?,
            None => Preset::for_dataset(dataset),
        };
        let base = toml::Table::try_from(Self::preset(preset, dataset)).map_err(|e| Error::config(e.to_string()))?;
        let merged = merge(base, user);
        let cfg: ExperimentConfig = merged.try_into().map_err(|e| Error::config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        self.dataset.split_ratios()?;
        if self.horizons.is_empty() || self.seeds.is_empty() || self.variants.is_empty() {
            return Err(Error::config("horizons, seeds and variants must be non-empty"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch_size must be positive"));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::config(format!("learning rate {} must be positive", self.lr)));
        }
        let kinds = || self.variants.iter().chain([&self.variant]);
        if kinds().any(|k| k.uses_lm()) {
            let vocab = self.tokenizer.build()?.vocab_size();
            if vocab > self.model.lm.vocab_size {
                return Err(Error::config(format!(
                    "tokenizer has {vocab} ids but the LM embeds only {}",
                    self.model.lm.vocab_size
                )));
            }
        }
        for &h in &self.horizons {
            for &k in kinds() {
                self.model_for(h).validate(k)?;
            }
        }
        Ok(())
    }

    pub fn model_for(&self, horizon: usize) -> ModelConfig {
        ModelConfig { horizon, ..self.model }
    }

    /// Builds the pretrained LM if a manifest is configured.
    pub fn load_lm(&self, rng: &mut crate::nn::Rng) -> Result<Option<LanguageModel<f32>>> {
        match &self.lm_weights {
            None => Ok(None),
            Some(base) => {
                let (index, blob) = crate::semlm::manifest_paths(base);
                let m = WeightManifest::read(&index, &blob)?;
                Ok(Some(LanguageModel::from_manifest(self.model.lm, &m, rng)?))
            }
        }
    }

    /// Stable hash of the serialized configuration, ignoring where outputs go.
    pub fn fingerprint(&self) -> String {
        let mut h = DefaultHasher::new();
        let cfg = ExperimentConfig {
            out_dir: PathBuf::new(),
            ..self.clone()
        };
        serde_json::to_string(&cfg).unwrap_or_default().hash(&mut h);
        format!("{:016x}", h.finish())
    }
}

fn merge(mut base: toml::Table, over: toml::Table) -> toml::Table {
    for (k, v) in over {
        match (base.remove(&k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(o)) => {
                base.insert(k, toml::Value::Table(merge(b, o)));
            }
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
    base
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_follow_the_dataset() {
        let ili = ExperimentConfig::from_toml("[dataset]\nname = \"national_illness\"\n").unwrap();
        assert_eq!(ili.preset, Preset::Ili);
        assert_eq!(
            (ili.model.lookback, ili.model.patch.patch_len, ili.model.patch.stride),
            (104, 24, 2)
        );
        assert_eq!((ili.model.backbone.d_model, ili.model.backbone.heads), (128, 16));

        let ett = ExperimentConfig::from_toml("[dataset]\nname = \"ETTh1\"\n").unwrap();
        assert_eq!((ett.model.lookback, ett.model.patch.patch_len, ett.model.patch.stride), (336, 16, 8));
        assert_eq!((ett.model.backbone.d_model, ett.model.backbone.heads), (16, 4));
        assert_eq!((ett.epochs, ett.lr, ett.seeds.len()), (300, 1e-4, 3));
        assert_eq!(ett.horizons, vec![96, 192, 336, 720]);
        assert_eq!(ett.dataset.split_ratios().unwrap(), SplitRatios::ETT);
    }

    #[test]
    fn overrides_merge_and_unknown_keys_fail() {
        let cfg = ExperimentConfig::from_toml(
            "epochs = 2\n[dataset]\nname = \"ETTh1\"\n[model.backbone]\nd_model = 32\n[tokenizer]\nkind = \"prompt_bpe\"\nmerges = 64\n",
        )
        .unwrap();
        assert_eq!(cfg.epochs, 2);
        assert_eq!(cfg.model.backbone.d_model, 32);
        assert_eq!(cfg.model.backbone.heads, 4);
        assert_eq!(cfg.tokenizer, TokenizerConfig::PromptBpe { merges: 64 });

        assert!(ExperimentConfig::from_toml("epoch = 2\n[dataset]\nname = \"x\"\n").is_err());
        assert!(ExperimentConfig::from_toml("[dataset]\nname = \"x\"\n[model]\nwidth = 3\n").is_err());
        assert!(ExperimentConfig::from_toml("[model]\nlookback = 3\n").is_err());
    }

    #[test]
    fn bundled_configs_parse() {
        for name in ["etth1.toml", "smoke.toml"] {
            let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("configs").join(name);
            let cfg = ExperimentConfig::load(&path).unwrap();
            assert_eq!(cfg.tokenizer.build().unwrap().vocab_size(), cfg.model.lm.vocab_size);
        }
    }

    #[test]
    fn tokenizer_must_fit_the_embedding_table() {
        let text = "[dataset]\nname = \"x\"\n[model.lm]\nvocab_size = 100\n";
        assert!(ExperimentConfig::from_toml(text).is_err());
    }

    #[test]
    fn toml_roundtrip() {
        let mut cfg = ExperimentConfig::preset(Preset::General, "sine");
        cfg.max_train_windows = Some(64);
        cfg.model.gate_override = Some(0.5);
        let back = ExperimentConfig::from_toml(&cfg.to_toml().unwrap()).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(back.fingerprint(), cfg.fingerprint());
    }
}
