use ndarray::Array2;

use crate::{Error, Result};

/// `ceil((L - S) / S) + 1` non-overlapping patches of length `S`.
pub fn patch_count(lookback: usize, patch_len: usize) -> usize {
    assert!(patch_len >= 1 && lookback >= patch_len);
    (lookback - patch_len).div_ceil(patch_len) + 1
}

/// A lookback split into `count x patch_len` patches; the final patch is
/// right-padded with zeros when `patch_len` does not divide the lookback.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchSequence {
    pub patches: Array2<f64>,
    pub patch_len: usize,
    pub count: usize,
    pub lookback: usize,
}

impl PatchSequence {
    /// Concatenates the patches and drops the padding.
    pub fn depatch(&self) -> Vec<f64> {
        self.patches.iter().copied().take(self.lookback).collect()
    }
}

pub fn patchify(lookback: &[f64], patch_len: usize) -> Result<PatchSequence> {
    let len = lookback.len();
    if patch_len == 0 || patch_len > len {
        return Err(Error::InvalidArgument(format!(
            "patch length {patch_len} must lie in [1, {len}]"
        )));
    }
    let count = patch_count(len, patch_len);
    let mut flat = vec![0.0; count * patch_len];
    flat[..len].copy_from_slice(lookback);
    Ok(PatchSequence {
        patches: Array2::from_shape_vec((count, patch_len), flat).expect("patch shape"),
        patch_len,
        count,
        lookback: len,
    })
}

/// Writes the patches of `lookback` into `out` (`count x patch_len`, row-major).
pub(crate) fn patchify_into(lookback: &[f64], out: &mut [f64]) {
    out[..lookback.len()].copy_from_slice(lookback);
    out[lookback.len()..].fill(0.0);
}
