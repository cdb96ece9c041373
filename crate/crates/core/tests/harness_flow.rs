mod common;

use std::process::Command;

use common::smoke_config;
use fusecast::data::Split;
use fusecast::harness::matrix::checkpoint_base;
use fusecast::harness::{
    attention_dump, build_model, forecast_rows, load_checkpoint, save_checkpoint, train, write_attention,
    write_embeddings, AttentionDump, ExperimentConfig, PreparedData, RunSpec,
};
use fusecast::nn::Module;
use fusecast::variants::{HybridModel, VariantKind};
use fusecast::Error;

fn spec(variant: VariantKind, cfg: &ExperimentConfig) -> RunSpec {
    RunSpec { variant, horizon: cfg.horizons[0], seed: cfg.seeds[0] }
}

fn params(model: &HybridModel<f32>) -> Vec<(String, Vec<f32>)> {
    model.named_params().into_iter().map(|(n, t)| (n, t.to_vec())).collect()
}

fn raw_channel(cfg: &ExperimentConfig, c: usize) -> Vec<f64> {
    fusecast::data::load_csv_auto(cfg.dataset.path()).unwrap().channel(c).to_vec()
}

#[test]
fn training_loss_trends_down() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = smoke_config(dir.path());
    cfg.epochs = 30;
    let data = PreparedData::load(&cfg.dataset).unwrap();
    let out = train(&cfg, &data, &spec(VariantKind::Fused, &cfg)).unwrap();
    let losses: Vec<f64> = out.curve.iter().map(|p| p.train_loss).collect();
    let ma: Vec<f64> = losses.windows(10).map(|w| w.iter().sum::<f64>() / 10.0).collect();
    for k in 0..ma.len().saturating_sub(10) {
        assert!(ma[k + 10] <= ma[k], "moving average rose from {} to {} at epoch {k}", ma[k], ma[k + 10]);
    }
}

#[test]
fn reruns_are_bit_identical() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = smoke_config(dir.path());
    let data = PreparedData::load(&cfg.dataset).unwrap();
    let s = spec(VariantKind::Fused, &cfg);
    let a = train(&cfg, &data, &s).unwrap();
    let b = train(&cfg, &data, &s).unwrap();
    assert_eq!(a.curve, b.curve);
    assert_eq!(params(&a.model), params(&b.model));
    let other = train(&cfg, &data, &RunSpec { seed: 1, ..s }).unwrap();
    assert_ne!(params(&a.model), params(&other.model));
}

#[test]
fn zero_epoch_checkpoint_is_the_initialization() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = smoke_config(dir.path());
    cfg.epochs = 0;
    let data = PreparedData::load(&cfg.dataset).unwrap();
    let s = spec(VariantKind::Fused, &cfg);
    let out = train(&cfg, &data, &s).unwrap();
    assert!(out.curve.is_empty());
    let base = checkpoint_base(dir.path(), &s.id(&data.name));
    save_checkpoint(&out.model, &cfg, &s, &base).unwrap();
    let loaded = load_checkpoint(&cfg, &s, &base).unwrap();
    assert_eq!(params(&loaded), params(&build_model(&cfg, &s).unwrap()));
}

#[test]
fn trained_checkpoint_roundtrips_and_rejects_mismatches() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = smoke_config(dir.path());
    let data = PreparedData::load(&cfg.dataset).unwrap();
    let s = spec(VariantKind::Fused, &cfg);
    let out = train(&cfg, &data, &s).unwrap();
    let base = checkpoint_base(dir.path(), &s.id(&data.name));
    save_checkpoint(&out.model, &cfg, &s, &base).unwrap();
    assert_eq!(params(&load_checkpoint(&cfg, &s, &base).unwrap()), params(&out.model));

    let mut wider = cfg.clone();
    wider.model.backbone.d_model = 32;
    assert!(matches!(load_checkpoint(&wider, &s, &base), Err(Error::Compatibility(_))));
    let other_variant = RunSpec { variant: VariantKind::TransOnly, ..s };
    assert!(matches!(load_checkpoint(&cfg, &other_variant, &base), Err(Error::Compatibility(_))));
}

#[test]
fn attention_export_is_normalized_and_causal() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = smoke_config(dir.path());
    let data = PreparedData::load(&cfg.dataset).unwrap();
    let model = build_model(&cfg, &spec(VariantKind::Fused, &cfg)).unwrap();
    let windows = data.windows(Split::Test, cfg.model.lookback, 96, None).unwrap();
    let dump = attention_dump(&model, windows[3].history, 3).unwrap();
    assert_eq!(dump.n_patches, model.n_patches);
    for map in [&dump.backbone, &dump.llm] {
        assert_eq!(map.weights.len(), map.heads);
        for head in &map.weights {
            assert_eq!(head.len(), model.n_patches);
            for row in head {
                assert_eq!(row.len(), model.n_patches);
            }
        }
    }
    for head in &dump.backbone.weights {
        for row in head {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6);
        }
    }
    // The LM rows are restricted to patch positions, so they sum to at most
    // one; above the diagonal they must be exactly zero.
    for head in &dump.llm.weights {
        for (q, row) in head.iter().enumerate() {
            assert!(row.iter().sum::<f64>() <= 1.0 + 1e-6);
            assert!(row[q + 1..].iter().all(|&w| w == 0.0), "row {q} attends forward");
        }
    }
    let path = write_attention(&dump, dir.path()).unwrap();
    assert!(path.ends_with("attn_3.json"));
    let back: AttentionDump = serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap();
    assert_eq!(back, dump);

    let trans_only = build_model(&cfg, &spec(VariantKind::TransOnly, &cfg)).unwrap();
    assert!(matches!(attention_dump(&trans_only, windows[0].history, 0), Err(Error::Capability { .. })));
    let decoder = build_model(&cfg, &spec(VariantKind::LlmDecoder, &cfg)).unwrap();
    assert!(matches!(attention_dump(&decoder, windows[0].history, 0), Err(Error::Capability { .. })));
}

#[test]
fn embedding_export_has_both_token_sets() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = smoke_config(dir.path());
    let data = PreparedData::load(&cfg.dataset).unwrap();
    let model = build_model(&cfg, &spec(VariantKind::Fused, &cfg)).unwrap();
    let windows = data.windows(Split::Test, cfg.model.lookback, 96, None).unwrap();
    let picked: Vec<_> = windows.iter().take(5).enumerate().collect();
    let path = dir.path().join("embeddings.csv");
    write_embeddings(&model, &picked, &path).unwrap();

    let mut r = csv::Reader::from_path(&path).unwrap();
    let header = r.headers().unwrap().clone();
    let d = cfg.model.backbone.d_model;
    assert_eq!(header.len(), 3 + d);
    assert_eq!(header.iter().take(3).collect::<Vec<_>>(), ["label", "window", "patch"]);
    let rows: Vec<csv::StringRecord> = r.records().map(Result::unwrap).collect();
    assert_eq!(rows.len(), 2 * 5 * model.n_patches);
    let mut labels: Vec<&str> = rows.iter().map(|r| &r[0]).collect();
    labels.sort_unstable();
    labels.dedup();
    assert_eq!(labels, ["llm", "transformer"]);
    assert!(rows.iter().all(|r| r.iter().skip(3).all(|v| v.parse::<f64>().unwrap().is_finite())));

    let trans_only = build_model(&cfg, &spec(VariantKind::TransOnly, &cfg)).unwrap();
    assert!(write_embeddings(&trans_only, &picked, &path).is_err());
}

#[test]
fn forecast_export_is_in_original_units() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = smoke_config(dir.path());
    let data = PreparedData::load(&cfg.dataset).unwrap();
    let model = build_model(&cfg, &spec(VariantKind::Fused, &cfg)).unwrap();
    let windows = data.windows(Split::Test, cfg.model.lookback, 96, None).unwrap();
    let win = &windows[7];
    let rows = forecast_rows(&model, &data, win).unwrap();
    let of = |k: &str| rows.iter().filter(|r| r.1 == k).map(|r| (r.0, r.2)).collect::<Vec<_>>();
    let (history, target, pred) = (of("history"), of("target"), of("prediction"));
    assert_eq!((history.len(), target.len(), pred.len()), (48, 96, 96));
    let raw = raw_channel(&cfg, win.channel_index);
    for (t, v) in history.iter().chain(&target) {
        assert!((v - raw[win.origin_timestep + t]).abs() < 1e-5);
    }
    assert!(pred.iter().enumerate().all(|(i, (t, v))| *t == 48 + i && v.is_finite()));
    assert_eq!(forecast_rows(&model, &data, win).unwrap(), rows);
}

#[test]
fn cli_trains_and_exports() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = smoke_config(dir.path());
    let config = dir.path().join("smoke.toml");
    std::fs::write(&config, cfg.to_toml().unwrap()).unwrap();
    let run = |args: &[&str]| {
        let out = Command::new(env!("CARGO_BIN_EXE_fusecast"))
            .args(args)
            .arg("--config")
            .arg(&config)
            .output()
            .unwrap();
        assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
        String::from_utf8(out.stdout).unwrap()
    };
    run(&["train"]);
    assert!(run(&["evaluate"]).contains("mse"));
    run(&["forecast", "--window", "2"]);
    run(&["export-attn", "--window", "1"]);
    run(&["export-embeddings", "--windows", "3"]);
    for f in ["forecast_2.csv", "attn_1.json", "embeddings.csv", "checkpoints/ETTh1_fused_h96_s0.json"] {
        assert!(dir.path().join(f).exists(), "{f} missing");
    }
    assert!(dir.path().join("curves/curve_ETTh1_fused_h96_s0.csv").exists());

    let bad = Command::new(env!("CARGO_BIN_EXE_fusecast"))
        .args(["evaluate", "--seed", "9", "--config"])
        .arg(&config)
        .output()
        .unwrap();
    assert!(!bad.status.success());
    assert!(String::from_utf8_lossy(&bad.stderr).starts_with("error:"));
}
