//! Every (variant, horizon, seed) cell of an experiment, with seed averages.
//!
//! `results.csv` holds one row per cell followed by one `mean` row per
//! (variant, horizon). Wall-clock times go to `timings.csv` so that the
//! results file is reproducible byte for byte.

use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::config::ExperimentConfig;
use super::export::{write_curve, write_file};
use super::train::{evaluate, save_checkpoint, train, PreparedData, RunSpec};
use crate::data::Split;
use crate::error::{Error, Result};

pub const MEAN_SEED: &str = "mean";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    pub dataset: String,
    pub variant: String,
    pub horizon: usize,
    /// A seed, or `mean` for aggregate rows.
    pub seed: String,
    pub mse: f64,
    pub mae: f64,
    pub status: String,
    pub fingerprint: String,
}

impl ResultRow {
    pub fn is_aggregate(&self) -> bool {
        self.seed == MEAN_SEED
    }

    pub fn is_ok(&self) -> bool {
        self.status == "ok"
    }
}

pub struct MatrixReport {
    pub rows: Vec<ResultRow>,
    pub aggregates: Vec<ResultRow>,
    pub timings: Vec<(String, f64)>,
    pub results_path: PathBuf,
}

pub fn cells(cfg: &ExperimentConfig) -> Vec<RunSpec> {
    let mut out = Vec::new();
    for &variant in &cfg.variants {
        for &horizon in &cfg.horizons {
            for &seed in &cfg.seeds {
                out.push(RunSpec { variant, horizon, seed });
            }
        }
    }
    out
}

pub fn checkpoint_base(out_dir: &Path, run_id: &str) -> PathBuf {
    out_dir.join("checkpoints").join(run_id)
}

pub fn curve_path(out_dir: &Path, run_id: &str) -> PathBuf {
    out_dir.join("curves").join(format!("curve_{run_id}.csv"))
}

/// Trains, checkpoints and tests one cell.
pub fn run_cell(cfg: &ExperimentConfig, data: &PreparedData, spec: &RunSpec) -> Result<(f64, f64)> {
    let id = spec.id(&data.name);
    let outcome = train(cfg, data, spec)?;
    save_checkpoint(&outcome.model, cfg, spec, &checkpoint_base(&cfg.out_dir, &id))?;
    write_curve(&outcome.curve, &curve_path(&cfg.out_dir, &id))?;
    let m = evaluate(&outcome.model, data, Split::Test, cfg.max_eval_windows)?;
    Ok((m.mse, m.mae))
}

pub fn run_matrix(cfg: &ExperimentConfig, data: &PreparedData) -> Result<MatrixReport> {
    let fingerprint = cfg.fingerprint();
    let run = |spec: &RunSpec| {
        let start = Instant::now();
        let outcome = run_cell(cfg, data, spec);
        (outcome, start.elapsed().as_secs_f64())
    };
    let specs = cells(cfg);
    let results: Vec<(Result<(f64, f64)>, f64)> = if cfg.deterministic {
        specs.iter().map(run).collect()
    } else {
        specs.par_iter().map(run).collect()
    };
    let mut rows = Vec::with_capacity(specs.len());
    let mut timings = Vec::with_capacity(specs.len());
    for (spec, (outcome, secs)) in specs.iter().zip(results) {
        let (mse, mae, status) = match outcome {
            Ok((mse, mae)) => (mse, mae, "ok".to_string()),
            Err(e) => (f64::NAN, f64::NAN, format!("failed: {e}")),
        };
        rows.push(ResultRow {
            dataset: data.name.clone(),
            variant: spec.variant.to_string(),
            horizon: spec.horizon,
            seed: spec.seed.to_string(),
            mse,
            mae,
            status,
            fingerprint: fingerprint.clone(),
        });
        timings.push((spec.id(&data.name), secs));
    }
    let aggregates = aggregate(&rows);
    let results_path = cfg.out_dir.join("results.csv");
    write_results(&rows, &aggregates, &results_path)?;
    write_timings(&timings, &cfg.out_dir.join("timings.csv"))?;
    Ok(MatrixReport {
        rows,
        aggregates,
        timings,
        results_path,
    })
}

/// Arithmetic means over successful seeds, one row per (dataset, variant,
/// horizon) in first-seen order.
pub fn aggregate(rows: &[ResultRow]) -> Vec<ResultRow> {
    let mut groups: Vec<(&ResultRow, Vec<&ResultRow>)> = Vec::new();
    for r in rows.iter().filter(|r| !r.is_aggregate()) {
        let key = |x: &ResultRow| (x.dataset.clone(), x.variant.clone(), x.horizon);
        match groups.iter_mut().find(|(k, _)| key(k) == key(r)) {
            Some((_, members)) => members.push(r),
            None => groups.push((r, vec![r])),
        }
    }
    groups
        .into_iter()
        .map(|(first, members)| {
            let ok: Vec<&&ResultRow> = members.iter().filter(|r| r.is_ok()).collect();
            let n = ok.len() as f64;
            let (mse, mae, status) = if ok.is_empty() {
                (f64::NAN, f64::NAN, "failed: no successful seeds".to_string())
            } else {
                let status = if ok.len() == members.len() {
                    "ok".to_string()
                } else {
                    format!("partial: {} of {} seeds", ok.len(), members.len())
                };
                (
                    ok.iter().map(|r| r.mse).sum::<f64>() / n,
                    ok.iter().map(|r| r.mae).sum::<f64>() / n,
                    status,
                )
            };
            ResultRow {
                seed: MEAN_SEED.into(),
                mse,
                mae,
                status,
                ..first.clone()
            }
        })
        .collect()
}

pub fn write_results(rows: &[ResultRow], aggregates: &[ResultRow], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows.iter().chain(aggregates) {
        w.serialize(r)?;
    }
    write_file(path, &w.into_inner().map_err(|e| Error::Format(e.to_string()))?)
}

pub fn read_results(path: &Path) -> Result<Vec<ResultRow>> {
    let mut r = csv::Reader::from_path(path)?;
    Ok(r.deserialize().collect::<std::result::Result<Vec<ResultRow>, _>>()?)
}

fn write_timings(timings: &[(String, f64)], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["run", "seconds"])?;
    for (id, s) in timings {
        w.write_record([id.clone(), format!("{s:.3}")])?;
    }
    write_file(path, &w.into_inner().map_err(|e| Error::Format(e.to_string()))?)
}
