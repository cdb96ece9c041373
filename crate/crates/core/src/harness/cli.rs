//! Command-line entry points.

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

use super::config::ExperimentConfig;
use super::export::{attention_dump, forecast_rows, write_attention, write_curve, write_embeddings, write_forecast};
use super::matrix::{checkpoint_base, curve_path, run_matrix};
use super::train::{evaluate, load_checkpoint, save_checkpoint, train, PreparedData, RunSpec};
use crate::data::Split;
use crate::error::{Error, Result};
use crate::variants::VariantKind;

#[derive(Debug, Parser)]
#[command(name = "fusecast", about = "Patch-Transformer forecasting with gated LM feature fusion")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train one run and save its checkpoint and loss curve.
    Train(RunArgs),
    /// Score a saved checkpoint on the test split.
    Evaluate(RunArgs),
    /// Train and test every variant × horizon × seed cell.
    RunMatrix(RunArgs),
    /// Dump attention maps for one test window.
    ExportAttn(RunArgs),
    /// Dump backbone and aligned LM token embeddings for test windows.
    ExportEmbeddings(RunArgs),
    /// Dump history, target and prediction for one test window.
    Forecast(RunArgs),
}

#[derive(Debug, Args)]
pub struct RunArgs {
    #[arg(long)]
    pub config: PathBuf,
    /// Dataset name; its file is looked up beside the configured one.
    #[arg(long)]
    pub dataset: Option<String>,
    #[arg(long)]
    pub variant: Option<VariantKind>,
    #[arg(long)]
    pub horizon: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub deterministic: bool,
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Test-window index for single-window exports.
    #[arg(long, default_value_t = 0)]
    pub window: usize,
    /// Number of test windows for the embedding export.
    #[arg(long, default_value_t = 8)]
    pub windows: usize,
}

impl RunArgs {
    fn resolve(&self) -> Result<(ExperimentConfig, RunSpec)> {
        let mut cfg = ExperimentConfig::load(&self.config)?;
        if let Some(name) = &self.dataset {
            let dir = cfg.dataset.path().parent().map(PathBuf::from).unwrap_or_default();
            cfg.dataset.path = Some(dir.join(format!("{name}.csv")));
            cfg.dataset.name = name.clone();
        }
        if let Some(v) = self.variant {
            cfg.variant = v;
            cfg.variants = vec![v];
        }
        if let Some(h) = self.horizon {
            cfg.horizons = vec![h];
        }
        if let Some(s) = self.seed {
            cfg.seeds = vec![s];
        }
        if self.deterministic {
            cfg.deterministic = true;
        }
        if let Some(out) = &self.out {
            cfg.out_dir = out.clone();
        }
        cfg.validate()?;
        let spec = RunSpec {
            variant: cfg.variant,
            horizon: cfg.horizons[0],
            seed: cfg.seeds[0],
        };
        Ok((cfg, spec))
    }
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train(a) => {
            let (cfg, spec) = a.resolve()?;
            let data = PreparedData::load(&cfg.dataset)?;
            let id = spec.id(&data.name);
            let outcome = train(&cfg, &data, &spec)?;
            save_checkpoint(&outcome.model, &cfg, &spec, &checkpoint_base(&cfg.out_dir, &id))?;
            write_curve(&outcome.curve, &curve_path(&cfg.out_dir, &id))?;
            if let Some(last) = outcome.curve.last() {
                println!("{id}: train {:.6} val {:.6}", last.train_loss, last.val_loss);
            }
        }
        Command::Evaluate(a) => {
            let (cfg, spec, data, model) = load(&a)?;
            let m = evaluate(&model, &data, Split::Test, cfg.max_eval_windows)?;
            println!("{}: mse {:.6} mae {:.6} over {} windows", spec.id(&data.name), m.mse, m.mae, m.windows);
        }
        Command::RunMatrix(a) => {
            let (cfg, _) = a.resolve()?;
            let data = PreparedData::load(&cfg.dataset)?;
            let report = run_matrix(&cfg, &data)?;
            for r in &report.aggregates {
                println!("{} {} h{}: mse {:.6} mae {:.6} ({})", r.dataset, r.variant, r.horizon, r.mse, r.mae, r.status);
            }
            println!("wrote {}", report.results_path.display());
        }
        Command::ExportAttn(a) => {
            let (cfg, _, data, model) = load(&a)?;
            let windows = data.windows(Split::Test, cfg.model.lookback, model.cfg.horizon, None)?;
            let win = windows.get(a.window).ok_or_else(|| window_error(a.window, windows.len()))?;
            let path = write_attention(&attention_dump(&model, win.history, a.window)?, &cfg.out_dir)?;
            println!("wrote {}", path.display());
        }
        Command::ExportEmbeddings(a) => {
            let (cfg, _, data, model) = load(&a)?;
            let windows = data.windows(Split::Test, cfg.model.lookback, model.cfg.horizon, None)?;
            let picked: Vec<_> = windows.iter().take(a.windows).enumerate().collect();
            let path = cfg.out_dir.join("embeddings.csv");
            write_embeddings(&model, &picked, &path)?;
            println!("wrote {}", path.display());
        }
        Command::Forecast(a) => {
            let (cfg, _, data, model) = load(&a)?;
            let windows = data.windows(Split::Test, cfg.model.lookback, model.cfg.horizon, None)?;
            let win = windows.get(a.window).ok_or_else(|| window_error(a.window, windows.len()))?;
            let path = cfg.out_dir.join(format!("forecast_{}.csv", a.window));
            write_forecast(&forecast_rows(&model, &data, win)?, &path)?;
            println!("wrote {}", path.display());
        }
    }
    Ok(())
}

type Loaded = (ExperimentConfig, RunSpec, PreparedData, crate::variants::HybridModel<f32>);

fn load(a: &RunArgs) -> Result<Loaded> {
    let (cfg, spec) = a.resolve()?;
    let data = PreparedData::load(&cfg.dataset)?;
    let model = load_checkpoint(&cfg, &spec, &checkpoint_base(&cfg.out_dir, &spec.id(&data.name)))?;
    Ok((cfg, spec, data, model))
}

fn window_error(i: usize, n: usize) -> Error {
    Error::config(format!("window {i} out of range ({n} test windows)"))
}
