//! File exports consumed by the plotting scripts.
//!
//! - `attn_<window>.json`: per-head attention of the last backbone layer and
//!   the last LM layer, the latter restricted to patch positions.
//! - `embeddings.csv`: `label,window,patch,f0..` rows for `transformer`
//!   (backbone intermediate) and `llm` (aligned LM features).
//! - `forecast_<window>.csv`: `t,kind,value` in original data units.
//! - `curve_<run>.csv`: `epoch,train_loss,val_loss`.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::train::{predict_batch, CurvePoint, PreparedData};
use crate::data::SeriesWindow;
use crate::error::{Error, Result};
use crate::nn::ForwardCtx;
use crate::numerics::{no_grad, Tensor};
use crate::variants::{ForwardTrace, HybridModel};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttentionMap {
    /// `backbone` or `llm`.
    pub component: String,
    /// 1-based layer index within its stack.
    pub layer: usize,
    pub heads: usize,
    /// Sequence positions covered by rows and columns.
    pub positions: Vec<usize>,
    pub causal: bool,
    /// `weights[head][query][key]`.
    pub weights: Vec<Vec<Vec<f64>>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttentionDump {
    pub window: usize,
    pub variant: String,
    pub n_patches: usize,
    pub axes: [String; 3],
    pub backbone: AttentionMap,
    pub llm: AttentionMap,
}

fn capability(model: &HybridModel<f32>, component: &'static str) -> Error {
    Error::Capability {
        variant: model.kind.to_string(),
        component,
    }
}

fn trace_one(model: &HybridModel<f32>, history: &[f64]) -> Result<ForwardTrace<f32>> {
    no_grad(|| model.forward_traced(&[history], &mut ForwardCtx::eval()))
}

/// Heads × rows × cols of batch item 0, keeping only `positions`.
fn slice_heads(w: &Tensor<f32>, positions: &[usize]) -> Vec<Vec<Vec<f64>>> {
    let &[_, heads, len, _] = w.shape() else {
        unreachable!("attention weights are [batch, heads, len, len]")
    };
    let data = w.data();
    (0..heads)
        .map(|h| {
            positions
                .iter()
                .map(|&q| {
                    positions
                        .iter()
                        .map(|&k| f64::from(data[(h * len + q) * len + k]))
                        .collect()
                })
                .collect()
        })
        .collect()
}

pub fn attention_dump(model: &HybridModel<f32>, history: &[f64], window: usize) -> Result<AttentionDump> {
    let full_depth = model
        .backbone
        .as_ref()
        .is_some_and(|b| b.layers.len() == b.cfg.layers);
    if !full_depth {
        return Err(capability(model, "final backbone layer"));
    }
    if model.semantic.is_none() {
        return Err(capability(model, "language model"));
    }
    let trace = trace_one(model, history)?;
    let n = model.n_patches;
    let bb = trace.backbone_attention.last().ok_or_else(|| capability(model, "backbone"))?;
    let sem = trace.semantic.as_ref().ok_or_else(|| capability(model, "language model"))?;
    let lm = sem.attention.last().ok_or_else(|| capability(model, "language model"))?;
    let x_positions: Vec<usize> = sem.layout.x_range().collect();
    Ok(AttentionDump {
        window,
        variant: model.kind.to_string(),
        n_patches: n,
        axes: ["head".into(), "query_patch".into(), "key_patch".into()],
        backbone: AttentionMap {
            component: "backbone".into(),
            layer: trace.backbone_attention.len(),
            heads: bb.shape()[1],
            positions: (0..n).collect(),
            causal: false,
            weights: slice_heads(bb, &(0..n).collect::<Vec<_>>()),
        },
        llm: AttentionMap {
            component: "llm".into(),
            layer: sem.attention.len(),
            heads: lm.shape()[1],
            causal: true,
            weights: slice_heads(lm, &x_positions),
            positions: x_positions,
        },
    })
}

pub fn write_attention(dump: &AttentionDump, dir: &Path) -> Result<std::path::PathBuf> {
    let path = dir.join(format!("attn_{}.json", dump.window));
    write_file(&path, serde_json::to_string_pretty(dump)?.as_bytes())?;
    Ok(path)
}

/// `transformer` and `llm` token rows for each window.
pub fn write_embeddings(model: &HybridModel<f32>, windows: &[(usize, &SeriesWindow<'_>)], path: &Path) -> Result<()> {
    if model.fusion.is_none() {
        return Err(capability(model, "fusion"));
    }
    let d = model.cfg.backbone.d_model;
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut header = vec!["label".to_string(), "window".into(), "patch".into()];
    header.extend((0..d).map(|i| format!("f{i}")));
    w.write_record(&header)?;
    for &(id, win) in windows {
        let trace = trace_one(model, win.history)?;
        let z = trace.z_lower.as_ref().ok_or_else(|| capability(model, "backbone"))?;
        let aligned = &trace.fusion.as_ref().ok_or_else(|| capability(model, "fusion"))?.aligned;
        for (label, t) in [("transformer", z), ("llm", aligned)] {
            for (p, row) in t.to_f64_vec().chunks(d).enumerate() {
                let mut rec = vec![label.to_string(), id.to_string(), p.to_string()];
                rec.extend(row.iter().map(|v| v.to_string()));
                w.write_record(&rec)?;
            }
        }
    }
    write_file(path, &w.into_inner().map_err(|e| Error::Format(e.to_string()))?)
}

/// History, target and prediction of one window in original units.
pub fn forecast_rows(model: &HybridModel<f32>, data: &PreparedData, win: &SeriesWindow<'_>) -> Result<Vec<(usize, &'static str, f64)>> {
    let pred = predict_batch(model, &[win.history])?.remove(0);
    let c = win.channel_index;
    let tx = win.history.len();
    let mut rows = Vec::with_capacity(tx + 2 * pred.len());
    for (t, v) in data.data.denormalize(c, win.history).into_iter().enumerate() {
        rows.push((t, "history", v));
    }
    for (t, v) in data.data.denormalize(c, win.target).into_iter().enumerate() {
        rows.push((tx + t, "target", v));
    }
    for (t, v) in data.data.denormalize(c, &pred).into_iter().enumerate() {
        rows.push((tx + t, "prediction", v));
    }
    Ok(rows)
}

pub fn write_forecast(rows: &[(usize, &str, f64)], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["t", "kind", "value"])?;
    for (t, kind, v) in rows {
        w.write_record([t.to_string(), kind.to_string(), v.to_string()])?;
    }
    write_file(path, &w.into_inner().map_err(|e| Error::Format(e.to_string()))?)
}

pub fn write_curve(curve: &[CurvePoint], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["epoch", "train_loss", "val_loss"])?;
    for p in curve {
        w.write_record([p.epoch.to_string(), p.train_loss.to_string(), p.val_loss.to_string()])?;
    }
    write_file(path, &w.into_inner().map_err(|e| Error::Format(e.to_string()))?)
}

pub(crate) fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(bytes).map_err(|e| Error::io(path, e))
}
