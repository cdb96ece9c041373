#![allow(dead_code)]

use fusecast::numerics::Tensor;
use rand::{Rng as _, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Coordinates where central differences and backprop disagree.
#[derive(Debug, Default)]
pub struct GradReport {
    pub checked: usize,
    pub max_rel: f64,
    pub worst: Option<(usize, usize, f64, f64)>,
}

/// Absolute floor on the relative-error denominator, so that coordinates
/// whose true derivative is ~0 are judged on absolute error instead.
pub const REL_FLOOR: f64 = 1e-6;
pub const STEP: f64 = 1e-6;

pub fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(REL_FLOOR)
}

/// Compares `backward()` of the scalar `f(inputs)` with central finite
/// differences for every element of every input.
pub fn gradcheck(inputs: &[Tensor<f64>], f: impl Fn(&[Tensor<f64>]) -> Tensor<f64>) -> GradReport {
    for t in inputs {
        t.set_requires_grad(true);
        t.zero_grad();
    }
    let out = f(inputs);
    assert_eq!(out.numel(), 1, "gradcheck needs a scalar output");
    out.backward().unwrap();
    let analytic: Vec<Vec<f64>> = inputs
        .iter()
        .map(|t| t.grad().unwrap_or_else(|| vec![0.0; t.numel()]))
        .collect();
    let mut report = GradReport::default();
    for (i, t) in inputs.iter().enumerate() {
        for j in 0..t.numel() {
            let orig = t.data()[j];
            t.data_mut()[j] = orig + STEP;
            let up = f(inputs).item().unwrap();
            t.data_mut()[j] = orig - STEP;
            let down = f(inputs).item().unwrap();
            t.data_mut()[j] = orig;
            let numeric = (up - down) / (2.0 * STEP);
            let e = rel_err(analytic[i][j], numeric);
            report.checked += 1;
            if e > report.max_rel {
                report.max_rel = e;
                report.worst = Some((i, j, analytic[i][j], numeric));
            }
        }
    }
    report
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new((0..n).map(|_| rng.random_range(-1.0..1.0)).collect(), shape).unwrap()
}

/// `Σ w ⊙ x` with fixed random weights, turning any tensor into a scalar
/// whose gradient exercises the full Jacobian.
pub fn project(x: &Tensor<f64>, seed: u64) -> Tensor<f64> {
    let w = random(x.shape(), &mut rng(seed));
    x.mul(&w).unwrap().sum()
}

pub fn sine_column(len: usize, period: f64) -> Vec<f64> {
    (0..len).map(|t| (t as f64 * std::f64::consts::TAU / period).sin()).collect()
}

pub mod grad_suite;

pub fn fixture(name: &str) -> std::path::PathBuf {
    std::path::Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures").join(name)
}

/// Small fast configuration over the 500-step ETT-format fixture.
///
/// Six hundred-odd timesteps cannot hold a 96-step horizon under 6:2:2 with
/// any useful lookback, so the split is widened to 4:3:3.
pub fn smoke_config(out_dir: &std::path::Path) -> fusecast::harness::ExperimentConfig {
    use fusecast::harness::{ExperimentConfig, TokenizerConfig};
    use fusecast::semlm::LmConfig;
    let tokenizer = TokenizerConfig::PromptBpe { merges: 256 };
    let vocab = tokenizer.build().unwrap().vocab_size();
    let text = format!(
        r#"
        epochs = 2
        lr = 1e-3
        batch_size = 16
        horizons = [96]
        seeds = [0]
        deterministic = true
        max_train_windows = 32
        max_eval_windows = 16
        [dataset]
        name = "ETTh1"
        path = {path:?}
        split = [0.4, 0.3, 0.3]
        [model]
        lookback = 48
        [model.patch]
        patch_len = 16
        stride = 8
        [tokenizer]
        kind = "prompt_bpe"
        merges = 256
        "#,
        path = fixture("ett_500.csv"),
    );
    let mut cfg = ExperimentConfig::from_toml(&text).unwrap();
    cfg.model.lm = LmConfig { max_positions: 256, ..LmConfig::tiny(32, 1, 4, vocab) };
    cfg.out_dir = out_dir.to_path_buf();
    cfg.validate().unwrap();
    cfg
}
