//! Training, evaluation and checkpoints for a single run.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use serde::{Deserialize, Serialize};

use super::config::{DatasetConfig, ExperimentConfig, TokenizerConfig};
use super::metrics::MetricAccumulator;
use crate::backbone::mse_loss;
use crate::data::{load_csv_auto, make_windows, zscore_fit_apply, SeriesDataset, SeriesWindow, Split};
use crate::error::{Error, Result};
use crate::nn::{ForwardCtx, Module, Rng};
use crate::numerics::{no_grad, Adam, AdamConfig, Tensor};
use crate::semlm::{manifest_paths, WeightManifest};
use crate::variants::{HybridModel, ModelConfig, VariantKind};

const EVAL_BATCH: usize = 256;

/// A Z-scored dataset ready for windowing.
#[derive(Debug, Clone)]
pub struct PreparedData {
    pub name: String,
    pub data: SeriesDataset,
}

impl PreparedData {
    pub fn load(cfg: &DatasetConfig) -> Result<Self> {
        let raw = load_csv_auto(cfg.path())?;
        Self::from_raw(&cfg.name, raw.with_split_ratios(cfg.split_ratios()?)?)
    }

    pub fn from_raw(name: &str, raw: SeriesDataset) -> Result<Self> {
        Ok(PreparedData {
            name: name.to_string(),
            data: zscore_fit_apply(&raw)?,
        })
    }

    /// Stride-1 windows of `split`, evenly thinned to at most `cap`.
    pub fn windows(
        &self,
        split: Split,
        lookback: usize,
        horizon: usize,
        cap: Option<usize>,
    ) -> Result<Vec<SeriesWindow<'_>>> {
        let ranges = self.data.split(lookback + horizon)?;
        let all = make_windows(&self.data, &ranges, split, lookback, horizon, 1)?;
        Ok(thin(all, cap))
    }
}

/// Keeps `cap` evenly spaced items, first item included.
pub fn thin<W>(items: Vec<W>, cap: Option<usize>) -> Vec<W> {
    match cap {
        Some(k) if k > 0 && items.len() > k => {
            let n = items.len();
            let mut keep = (0..k).map(|i| i * n / k).peekable();
            items
                .into_iter()
                .enumerate()
                .filter_map(|(i, w)| {
                    if keep.peek() == Some(&i) {
                        keep.next();
                        Some(w)
                    } else {
                        None
                    }
                })
                .collect()
        }
        _ => items,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RunSpec {
    pub variant: VariantKind,
    pub horizon: usize,
    pub seed: u64,
}

impl RunSpec {
    pub fn id(&self, dataset: &str) -> String {
        format!("{dataset}_{}_h{}_s{}", self.variant, self.horizon, self.seed)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
}

pub struct TrainOutcome {
    pub model: HybridModel<f32>,
    pub curve: Vec<CurvePoint>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalMetrics {
    pub mse: f64,
    pub mae: f64,
    pub windows: usize,
}

fn stream_rng(seed: u64, stream: u64) -> Rng {
    let mut rng = Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Deterministic initialization for `spec`.
pub fn build_model(cfg: &ExperimentConfig, spec: &RunSpec) -> Result<HybridModel<f32>> {
    let mut rng = Rng::seed_from_u64(spec.seed);
    let tokenizer = cfg.tokenizer.build()?;
    let lm = if spec.variant.uses_lm() { cfg.load_lm(&mut rng)? } else { None };
    HybridModel::build(spec.variant, cfg.model_for(spec.horizon), &tokenizer, lm, &mut rng)
}

fn target_tensor(windows: &[&SeriesWindow<'_>]) -> Result<Tensor<f32>> {
    let h = windows[0].target.len();
    let data = windows.iter().flat_map(|w| w.target.iter().map(|&v| v as f32)).collect();
    Tensor::new(data, &[windows.len(), h])
}

/// Runs `epochs` of shuffled mini-batch Adam on the training windows.
pub fn train(cfg: &ExperimentConfig, data: &PreparedData, spec: &RunSpec) -> Result<TrainOutcome> {
    let model = build_model(cfg, spec)?;
    let lookback = cfg.model.lookback;
    let train_windows = data.windows(Split::Train, lookback, spec.horizon, cfg.max_train_windows)?;
    let val_windows = data.windows(Split::Val, lookback, spec.horizon, cfg.max_eval_windows)?;
    let mut opt = Adam::new(
        model.trainable_params(),
        AdamConfig {
            lr: cfg.lr,
            ..AdamConfig::default()
        },
    );
    let mut shuffle_rng = stream_rng(spec.seed, 1);
    let mut dropout_rng = stream_rng(spec.seed, 2);
    let mut order: Vec<usize> = (0..train_windows.len()).collect();
    let mut curve = Vec::with_capacity(cfg.epochs);
    let mut best = f64::INFINITY;
    let mut stale = 0;
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut shuffle_rng);
        let mut total = 0.0;
        let mut batches = 0;
        for (b, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let batch: Vec<&SeriesWindow<'_>> = chunk.iter().map(|&i| &train_windows[i]).collect();
            let histories: Vec<&[f64]> = batch.iter().map(|w| w.history).collect();
            let mut ctx = ForwardCtx::train(&mut dropout_rng);
            let pred = model.predict(&histories, &mut ctx)?;
            let loss = mse_loss(&pred, &target_tensor(&batch)?)?;
            let value = f64::from(loss.item()?);
            if !value.is_finite() {
                return Err(Error::NonFiniteLoss {
                    epoch,
                    batch: b,
                    lr: cfg.lr,
                });
            }
            opt.zero_grad();
            loss.backward()?;
            opt.step()?;
            total += value;
            batches += 1;
        }
        let val = evaluate_windows(&model, &val_windows)?.mse;
        curve.push(CurvePoint {
            epoch,
            train_loss: total / batches.max(1) as f64,
            val_loss: val,
        });
        if let Some(p) = cfg.patience {
            if val < best {
                best = val;
                stale = 0;
            } else {
                stale += 1;
                if stale >= p {
                    break;
                }
            }
        }
    }
    opt.zero_grad();
    Ok(TrainOutcome { model, curve })
}

/// Scores any batch predictor on `windows` (predictions in Z-score units).
pub fn evaluate_with(
    windows: &[SeriesWindow<'_>],
    mut predict: impl FnMut(&[&[f64]]) -> Result<Vec<Vec<f64>>>,
) -> Result<EvalMetrics> {
    let mut acc = MetricAccumulator::default();
    for chunk in windows.chunks(EVAL_BATCH) {
        let histories: Vec<&[f64]> = chunk.iter().map(|w| w.history).collect();
        let preds = predict(&histories)?;
        for (p, w) in preds.iter().zip(chunk) {
            if p.len() != w.target.len() {
                return Err(Error::contract(format!(
                    "prediction of length {} for horizon {}",
                    p.len(),
                    w.target.len()
                )));
            }
            acc.push(p, w.target);
        }
    }
    if acc.count() == 0 {
        return Err(Error::InsufficientData("no windows to evaluate".into()));
    }
    Ok(EvalMetrics {
        mse: acc.mse(),
        mae: acc.mae(),
        windows: windows.len(),
    })
}

pub fn predict_batch(model: &HybridModel<f32>, histories: &[&[f64]]) -> Result<Vec<Vec<f64>>> {
    let pred = no_grad(|| model.predict(histories, &mut ForwardCtx::eval()))?;
    let h = pred.shape()[1];
    Ok(pred.to_f64_vec().chunks(h).map(<[f64]>::to_vec).collect())
}

pub fn evaluate_windows(model: &HybridModel<f32>, windows: &[SeriesWindow<'_>]) -> Result<EvalMetrics> {
    evaluate_with(windows, |h| predict_batch(model, h))
}

pub fn evaluate(
    model: &HybridModel<f32>,
    data: &PreparedData,
    split: Split,
    cap: Option<usize>,
) -> Result<EvalMetrics> {
    let windows = data.windows(split, model.cfg.lookback, model.cfg.horizon, cap)?;
    evaluate_windows(model, &windows)
}

/// Repeats the last observed value over the horizon.
pub fn naive_forecast(histories: &[&[f64]], horizon: usize) -> Vec<Vec<f64>> {
    histories
        .iter()
        .map(|h| vec![*h.last().unwrap_or(&0.0); horizon])
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CheckpointMeta {
    spec: RunSpec,
    model: ModelConfig,
    tokenizer: TokenizerConfig,
}

/// Writes trainable parameters as a weight manifest plus a metadata file.
/// Frozen weights are rebuilt from the run seed (or LM manifest) on load.
pub fn save_checkpoint(model: &HybridModel<f32>, cfg: &ExperimentConfig, spec: &RunSpec, base: &Path) -> Result<()> {
    let mut m = WeightManifest::new();
    for (name, t) in model.named_params() {
        if t.requires_grad() {
            m.insert_tensor(name, &t)?;
        }
    }
    if let Some(dir) = base.parent() {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let (index, blob) = manifest_paths(base);
    m.write(&index, &blob)?;
    let meta = CheckpointMeta {
        spec: *spec,
        model: cfg.model_for(spec.horizon),
        tokenizer: cfg.tokenizer.clone(),
    };
    let meta_path = base.with_extension("meta.json");
    std::fs::write(&meta_path, serde_json::to_string_pretty(&meta)?).map_err(|e| Error::io(&meta_path, e))
}

pub fn load_checkpoint(cfg: &ExperimentConfig, spec: &RunSpec, base: &Path) -> Result<HybridModel<f32>> {
    let meta_path = base.with_extension("meta.json");
    let text = std::fs::read_to_string(&meta_path).map_err(|e| Error::io(&meta_path, e))?;
    let meta: CheckpointMeta = serde_json::from_str(&text)?;
    let expected = CheckpointMeta {
        spec: *spec,
        model: cfg.model_for(spec.horizon),
        tokenizer: cfg.tokenizer.clone(),
    };
    if meta != expected {
        return Err(Error::Compatibility(format!(
            "checkpoint {} was written for a different run or model configuration",
            base.display()
        )));
    }
    let (index, blob) = manifest_paths(base);
    let m = WeightManifest::read(&index, &blob)?;
    let model = build_model(cfg, spec)?;
    let trainable: Vec<(String, Tensor<f32>)> =
        model.named_params().into_iter().filter(|(_, t)| t.requires_grad()).collect();
    if trainable.len() != m.len() {
        return Err(Error::Compatibility(format!(
            "checkpoint holds {} tensors, model has {} trainable",
            m.len(),
            trainable.len()
        )));
    }
    for (name, t) in &trainable {
        m.load_into(name, t)
            .map_err(|e| Error::Compatibility(format!("checkpoint does not fit the model: {e}")))?;
    }
    Ok(model)
}
