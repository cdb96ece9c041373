//! Overlapping patches over an end-padded history.
//!
//! The history is extended by repeating its last value `stride` times, then
//! cut into `floor((len - patch_len) / stride) + 2` windows of `patch_len`
//! starting at multiples of `stride`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PatchConfig {
    pub patch_len: usize,
    pub stride: usize,
}

impl PatchConfig {
    pub fn new(patch_len: usize, stride: usize) -> Result<Self> {
        let cfg = PatchConfig { patch_len, stride };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.patch_len == 0 || self.stride == 0 {
            return Err(Error::config("patch length and stride must be positive"));
        }
        if self.stride > self.patch_len {
            return Err(Error::config(format!(
                "stride {} exceeds patch length {} and would skip timesteps",
                self.stride, self.patch_len
            )));
        }
        Ok(())
    }

    /// Validates against a history length and returns the patch count.
    pub fn patches_for(&self, history_len: usize) -> Result<usize> {
        patch_count(history_len, self.patch_len, self.stride)
    }
}

/// `floor((history_len - patch_len) / stride) + 2`.
pub fn patch_count(history_len: usize, patch_len: usize, stride: usize) -> Result<usize> {
    PatchConfig { patch_len, stride }.validate()?;
    if patch_len > history_len {
        return Err(Error::config(format!(
            "patch length {patch_len} exceeds history length {history_len}"
        )));
    }
    Ok((history_len - patch_len) / stride + 2)
}

/// Appends `stride` copies of the final value.
pub fn pad_series(history: &[f64], stride: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(history.len() + stride);
    out.extend_from_slice(history);
    if let Some(&last) = history.last() {
        out.extend(std::iter::repeat_n(last, stride));
    }
    out
}

/// `n_patches x patch_len` row-major patch view of one history.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchMatrix {
    pub patches: Vec<f64>,
    pub n_patches: usize,
    pub patch_len: usize,
    pub source_len: usize,
}

impl PatchMatrix {
    pub fn row(&self, i: usize) -> &[f64] {
        &self.patches[i * self.patch_len..(i + 1) * self.patch_len]
    }
}

pub fn patchify(history: &[f64], cfg: PatchConfig) -> Result<PatchMatrix> {
    let n = cfg.patches_for(history.len())?;
    let padded = pad_series(history, cfg.stride);
    let mut patches = Vec::with_capacity(n * cfg.patch_len);
    for i in 0..n {
        let start = i * cfg.stride;
        patches.extend_from_slice(&padded[start..start + cfg.patch_len]);
    }
    Ok(PatchMatrix {
        patches,
        n_patches: n,
        patch_len: cfg.patch_len,
        source_len: history.len(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn padding_repeats_last_value() {
        assert_eq!(pad_series(&[1.0, 2.0, 3.0], 2), vec![1.0, 2.0, 3.0, 3.0, 3.0]);
        assert_eq!(pad_series(&[4.0, -1.0], 1), vec![4.0, -1.0, -1.0]);
    }

    #[test]
    fn patch_count_examples() {
        assert_eq!(patch_count(336, 16, 8).unwrap(), 42);
        assert_eq!(patch_count(104, 24, 2).unwrap(), 42);
        assert_eq!(patch_count(10, 4, 3).unwrap(), 4);
        for s in 1..=7 {
            assert_eq!(patch_count(7, 7, s).unwrap(), 2);
        }
    }

    #[test]
    fn patchify_small_case() {
        let h: Vec<f64> = (0..10).map(f64::from).collect();
        let p = patchify(&h, PatchConfig::new(4, 3).unwrap()).unwrap();
        assert_eq!(p.n_patches, 4);
        assert_eq!(p.row(0), &[0.0, 1.0, 2.0, 3.0]);
        assert_eq!(p.row(3), &[9.0, 9.0, 9.0, 9.0]);
    }

    #[test]
    fn config_errors() {
        assert!(patch_count(8, 9, 1).is_err());
        assert!(PatchConfig::new(4, 5).is_err());
        assert!(PatchConfig::new(0, 1).is_err());
        let h = [1.0; 5];
        assert!(patchify(&h, PatchConfig::new(6, 2).unwrap()).is_err());
    }
}
