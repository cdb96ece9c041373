//! Sigmoid-gated blending of the aligned LM features with the backbone
//! intermediate: `g · Z_LLM′ + (1 − g) · Z`, with
//! `g = σ(W [Z_LLM′, Z] + b)`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{join, Linear, Module, Rng};
use crate::numerics::{Scalar, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GateMode {
    /// One gate per feature of each patch position.
    #[default]
    Vector,
    /// One gate per patch position, shared across features.
    Scalar,
}

/// `d_lm → d_model`, bias-free.
pub fn align_layer<T: Scalar>(d_lm: usize, d_model: usize, rng: &mut Rng) -> Linear<T> {
    Linear::new(d_lm, d_model, false, rng)
}

/// `g · a + (1 − g) · b`, with `g` broadcast over trailing features.
pub fn fuse<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>, g: &Tensor<T>) -> Result<Tensor<T>> {
    if a.shape() != b.shape() {
        return Err(Error::Dimension {
            op: "fuse",
            left: a.shape().to_vec(),
            right: b.shape().to_vec(),
        });
    }
    g.mul(a)?.add(&g.one_minus().mul(b)?)
}

pub struct FusionOutput<T: Scalar> {
    pub aligned: Tensor<T>,
    pub gate: Tensor<T>,
    pub fused: Tensor<T>,
}

#[derive(Clone)]
pub struct GatedFusion<T: Scalar> {
    pub align: Linear<T>,
    pub gate: Linear<T>,
    pub mode: GateMode,
    /// When set, the learned gate is bypassed and `g` is this constant.
    pub gate_override: Option<f64>,
}

impl<T: Scalar> GatedFusion<T> {
    pub fn new(d_lm: usize, d_model: usize, mode: GateMode, rng: &mut Rng) -> Self {
        let gate_out = match mode {
            GateMode::Vector => d_model,
            GateMode::Scalar => 1,
        };
        GatedFusion {
            align: align_layer(d_lm, d_model, rng),
            gate: Linear::new(2 * d_model, gate_out, true, rng),
            mode,
            gate_override: None,
        }
    }

    pub fn align_semantic(&self, z_llm: &Tensor<T>) -> Result<Tensor<T>> {
        self.align.forward(z_llm)
    }

    /// `σ(linear([aligned, z]))`, shape `[.., d_model]` or `[.., 1]`.
    pub fn gate_values(&self, aligned: &Tensor<T>, z: &Tensor<T>) -> Result<Tensor<T>> {
        if let Some(g) = self.gate_override {
            let mut shape = z.shape().to_vec();
            if self.mode == GateMode::Scalar {
                *shape.last_mut().expect("fusion input has a feature axis") = 1;
            }
            return Ok(Tensor::full(&shape, T::c(g)));
        }
        let axis = z.rank() - 1;
        Ok(self.gate.forward(&Tensor::concat(&[aligned, z], axis)?)?.sigmoid())
    }

    pub fn forward(&self, z_llm: &Tensor<T>, z: &Tensor<T>) -> Result<FusionOutput<T>> {
        let aligned = self.align_semantic(z_llm)?;
        let gate = self.gate_values(&aligned, z)?;
        let fused = fuse(&aligned, z, &gate)?;
        Ok(FusionOutput { aligned, gate, fused })
    }
}

impl<T: Scalar> Module<T> for GatedFusion<T> {
    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor<T>)) {
        self.align.visit_params(&join(prefix, "align"), f);
        self.gate.visit_params(&join(prefix, "gate"), f);
    }
}

/// `Z_LLM′ + Z` with no gate.
#[derive(Clone)]
pub struct AdditiveFusion<T: Scalar> {
    pub align: Linear<T>,
}

impl<T: Scalar> AdditiveFusion<T> {
    pub fn new(d_lm: usize, d_model: usize, rng: &mut Rng) -> Self {
        AdditiveFusion {
            align: align_layer(d_lm, d_model, rng),
        }
    }

    pub fn forward(&self, z_llm: &Tensor<T>, z: &Tensor<T>) -> Result<FusionOutput<T>> {
        let aligned = self.align.forward(z_llm)?;
        let fused = aligned.add(z)?;
        Ok(FusionOutput {
            gate: Tensor::full(&[1], T::one()),
            aligned,
            fused,
        })
    }
}

impl<T: Scalar> Module<T> for AdditiveFusion<T> {
    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor<T>)) {
        self.align.visit_params(&join(prefix, "align"), f);
    }
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;

    use super::*;
    use crate::numerics::init;

    fn setup(mode: GateMode) -> (GatedFusion<f64>, Tensor<f64>, Tensor<f64>) {
        let mut rng = Rng::seed_from_u64(9);
        let f = GatedFusion::new(12, 4, mode, &mut rng);
        let z_llm = init::uniform::<f64>(&[2, 3, 12], 2.0, &mut rng);
        let z = init::uniform::<f64>(&[2, 3, 4], 2.0, &mut rng);
        (f, z_llm, z)
    }

    #[test]
    fn zero_gate_weights_give_one_half() {
        let (f, z_llm, z) = setup(GateMode::Vector);
        f.gate.weight.data_mut().iter_mut().for_each(|v| *v = 0.0);
        let out = f.forward(&z_llm, &z).unwrap();
        assert!(out.gate.to_vec().iter().all(|&g| g == 0.5));
        f.gate.bias.as_ref().unwrap().data_mut().iter_mut().for_each(|v| *v = 20.0);
        let out = f.forward(&z_llm, &z).unwrap();
        assert!(out.gate.to_vec().iter().all(|&g| (1.0 - g) < 1e-8));
    }

    #[test]
    fn overrides_are_exact() {
        let (mut f, z_llm, z) = setup(GateMode::Vector);
        f.gate_override = Some(0.0);
        assert_eq!(f.forward(&z_llm, &z).unwrap().fused.to_vec(), z.to_vec());
        f.gate_override = Some(1.0);
        let out = f.forward(&z_llm, &z).unwrap();
        assert_eq!(out.fused.to_vec(), out.aligned.to_vec());
        f.gate_override = Some(0.5);
        let out = f.forward(&z_llm, &z).unwrap();
        let half: Vec<f64> = out.aligned.to_vec().iter().zip(z.to_vec()).map(|(a, b)| 0.5 * (a + b)).collect();
        assert_eq!(out.fused.to_vec(), half);
    }

    #[test]
    fn scalar_gate_has_one_value_per_position() {
        let (f, z_llm, z) = setup(GateMode::Scalar);
        let out = f.forward(&z_llm, &z).unwrap();
        assert_eq!(out.gate.shape(), &[2, 3, 1]);
        assert_eq!(out.fused.shape(), &[2, 3, 4]);
    }

    #[test]
    fn gradient_reaches_both_branches_and_align() {
        let (f, z_llm, z) = setup(GateMode::Vector);
        z.set_requires_grad(true);
        z_llm.set_requires_grad(true);
        let out = f.forward(&z_llm, &z).unwrap();
        out.fused.square().sum().backward().unwrap();
        for t in [&z, &z_llm, &f.align.weight, &f.gate.weight] {
            assert!(t.grad().unwrap().iter().any(|&g| g != 0.0));
        }
    }

    #[test]
    fn additive_has_no_gate_params() {
        let mut rng = Rng::seed_from_u64(1);
        let add = AdditiveFusion::<f64>::new(12, 4, &mut rng);
        let names: Vec<String> = add.named_params().into_iter().map(|(n, _)| n).collect();
        assert_eq!(names, vec!["align.weight"]);
        let z_llm = init::uniform::<f64>(&[1, 3, 12], 1.0, &mut rng);
        let z = init::uniform::<f64>(&[1, 3, 4], 1.0, &mut rng);
        let out = add.forward(&z_llm, &z).unwrap();
        let expect: Vec<f64> = out.aligned.to_vec().iter().zip(z.to_vec()).map(|(a, b)| a + b).collect();
        assert_eq!(out.fused.to_vec(), expect);
    }
}
