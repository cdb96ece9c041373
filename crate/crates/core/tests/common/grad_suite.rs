//! Finite-difference cases for every differentiable op and a tiny fused model.

use fusecast::backbone::{mse_loss, BackboneConfig};
use fusecast::nn::{ForwardCtx, Module};
use fusecast::numerics::{elementwise, mse, ElementwiseOp, Mask, Tensor};
use fusecast::patching::PatchConfig;
use fusecast::semlm::{LmConfig, Tokenizer};
use fusecast::variants::{HybridModel, ModelConfig, VariantKind};
use rand::SeedableRng;

use super::{gradcheck, project, random, rng, GradReport};

type Case = (&'static str, GradReport);

pub fn op_cases() -> Vec<Case> {
    let mut r = rng(42);
    let mut out: Vec<Case> = Vec::new();
    let a = random(&[3, 4], &mut r);
    let b = random(&[3, 4], &mut r);
    let row = random(&[4], &mut r);

    out.push(("add", gradcheck(&[a.clone(), b.clone()], |x| project(&x[0].add(&x[1]).unwrap(), 1))));
    out.push(("sub", gradcheck(&[a.clone(), b.clone()], |x| project(&x[0].sub(&x[1]).unwrap(), 2))));
    out.push(("mul", gradcheck(&[a.clone(), b.clone()], |x| project(&x[0].mul(&x[1]).unwrap(), 3))));
    out.push(("broadcast add", gradcheck(&[a.clone(), row.clone()], |x| project(&x[0].add(&x[1]).unwrap(), 4))));
    out.push(("broadcast mul", gradcheck(&[row.clone(), a.clone()], |x| project(&x[0].mul(&x[1]).unwrap(), 5))));
    let col = random(&[3, 1], &mut r);
    out.push(("general broadcast", gradcheck(&[col, row.clone()], |x| project(&x[0].mul(&x[1]).unwrap(), 6))));

    for (name, op) in [
        ("sigmoid", ElementwiseOp::Sigmoid),
        ("gelu", ElementwiseOp::Gelu),
        ("tanh", ElementwiseOp::Tanh),
        ("exp", ElementwiseOp::Exp),
        ("square", ElementwiseOp::Square),
    ] {
        out.push((name, gradcheck(std::slice::from_ref(&a), move |x| project(&elementwise(op, &[&x[0]]).unwrap(), 7))));
    }
    out.push(("neg", gradcheck(std::slice::from_ref(&a), |x| project(&x[0].neg(), 8))));
    out.push(("scale", gradcheck(std::slice::from_ref(&a), |x| project(&x[0].scale(-1.7), 9))));
    out.push(("add_scalar", gradcheck(std::slice::from_ref(&a), |x| project(&x[0].add_scalar(0.3), 10))));
    out.push(("one_minus", gradcheck(std::slice::from_ref(&a), |x| project(&x[0].one_minus(), 11))));
    out.push(("sum", gradcheck(std::slice::from_ref(&a), |x| x[0].square().sum())));
    out.push(("mean", gradcheck(std::slice::from_ref(&a), |x| x[0].square().mean())));

    let m = random(&[4, 5], &mut r);
    out.push(("matmul", gradcheck(&[a.clone(), m.clone()], |x| project(&x[0].matmul(&x[1]).unwrap(), 12))));
    let x3 = random(&[2, 3, 4], &mut r);
    out.push(("matmul flattened", gradcheck(&[x3.clone(), m.clone()], |x| project(&x[0].matmul(&x[1]).unwrap(), 13))));
    let y3 = random(&[2, 4, 2], &mut r);
    out.push(("matmul batched", gradcheck(&[x3.clone(), y3], |x| project(&x[0].matmul(&x[1]).unwrap(), 14))));

    out.push(("softmax", gradcheck(std::slice::from_ref(&x3), |x| project(&x[0].softmax_lastdim(None).unwrap(), 15))));
    let sq = random(&[2, 4, 4], &mut r);
    let causal = Mask::causal(4);
    out.push((
        "masked softmax",
        gradcheck(&[sq], move |x| project(&x[0].softmax_lastdim(Some(&causal)).unwrap(), 16)),
    ));
    let gain = random(&[4], &mut r);
    let bias = random(&[4], &mut r);
    out.push((
        "layer_norm",
        gradcheck(&[x3.clone(), gain, bias], |x| project(&x[0].layer_norm(&x[1], &x[2], 1e-5).unwrap(), 17)),
    ));

    out.push(("reshape", gradcheck(std::slice::from_ref(&x3), |x| project(&x[0].reshape(&[6, 4]).unwrap(), 18))));
    out.push(("permute", gradcheck(std::slice::from_ref(&x3), |x| project(&x[0].permute(&[2, 0, 1]).unwrap(), 19))));
    out.push(("transpose", gradcheck(std::slice::from_ref(&x3), |x| project(&x[0].transpose_last2().unwrap(), 20))));
    out.push(("broadcast_to", gradcheck(std::slice::from_ref(&row), |x| project(&x[0].broadcast_to(&[2, 3, 4]).unwrap(), 21))));
    out.push((
        "concat",
        gradcheck(&[a.clone(), b.clone()], |x| project(&Tensor::concat(&[&x[0], &x[1]], 1).unwrap(), 22)),
    ));
    out.push(("narrow", gradcheck(std::slice::from_ref(&x3), |x| project(&x[0].narrow(1, 1, 2).unwrap(), 23))));
    out.push(("index_rows", gradcheck(std::slice::from_ref(&a), |x| project(&x[0].index_rows(&[2, 0, 2, 1]).unwrap(), 24))));
    out.push(("mse", gradcheck(&[a.clone(), b.clone()], |x| mse(&x[0], &x[1]).unwrap())));
    out.push((
        "dropout",
        gradcheck(std::slice::from_ref(&a), |x| {
            let mut fixed = rng(99);
            project(&x[0].dropout(0.3, &mut fixed), 25)
        }),
    ));
    out
}

/// Fused variant with `N = 4` patches of length 4, `d_model = 8`, a
/// one-layer `d_lm = 16` LM, checked over every trainable parameter.
pub fn fused_model_case() -> Case {
    let tokenizer = Tokenizer::prompt_bpe(256).unwrap();
    let cfg = ModelConfig {
        lookback: 8,
        horizon: 4,
        patch: PatchConfig { patch_len: 4, stride: 2 },
        backbone: BackboneConfig {
            d_model: 8,
            heads: 2,
            layers: 2,
            fusion_after_layer: 1,
            ffn_mult: 2,
            dropout: 0.0,
        },
        lm: LmConfig::tiny(16, 1, 2, tokenizer.vocab_size()),
        ..ModelConfig::default()
    };
    let mut init = fusecast::nn::Rng::seed_from_u64(5);
    let model = HybridModel::<f64>::build(VariantKind::Fused, cfg, &tokenizer, None, &mut init).unwrap();
    assert_eq!(model.n_patches, 4);
    // Non-zero adapters so their gradients are generic.
    for (name, p) in model.named_params() {
        if name.ends_with("lora.b") {
            let v = random(p.shape(), &mut rng(7));
            p.data_mut().copy_from_slice(&v.to_vec());
        }
    }
    let mut r = rng(11);
    let histories: Vec<Vec<f64>> = (0..2).map(|_| random(&[8], &mut r).to_vec()).collect();
    let target = random(&[2, 4], &mut r);
    let params = model.trainable_params();
    let report = gradcheck(&params, |_| {
        let h: Vec<&[f64]> = histories.iter().map(Vec::as_slice).collect();
        let pred = model.predict(&h, &mut ForwardCtx::eval()).unwrap();
        mse_loss(&pred, &target).unwrap()
    });
    ("tiny fused model", report)
}
