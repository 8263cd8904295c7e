//! Pre-softmax score edits applied inside the RoI.
//!
//! Infinite offsets are realised as finite sentinels: after max-subtracted
//! softmax, `-LARGE` entries exponentiate to exactly zero and `+LARGE` entries
//! share all the mass.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const LARGE: f32 = 1e9;

/// Set every listed token score of one row to `-LARGE`.
#[inline]
pub fn regularize_row(row: &mut [f32], unrelated: &[usize]) {
    for &t in unrelated {
        row[t] = -LARGE;
    }
}

/// Set every listed token score of one row to `+LARGE`.
#[inline]
pub fn reward_row(row: &mut [f32], related: &[usize]) {
    for &t in related {
        row[t] = LARGE;
    }
}

fn check(scores: &Tensor, mask: &[bool], tokens: &[usize]) -> Result<(usize, usize)> {
    let [n, d] = scores.dims()[..] else {
        return Err(Error::shape(format!(
            "scores must be n×D, got {:?}",
            scores.dims()
        )));
    };
    if mask.len() != n {
        return Err(Error::shape(format!("mask of {} for {n} rows", mask.len())));
    }
    if let Some(&t) = tokens.iter().find(|&&t| t >= d) {
        return Err(Error::InvalidArgument(format!(
            "token {t} outside {d} tokens"
        )));
    }
    Ok((n, d))
}

/// Suppress the unrelated tokens `unrelated` at every masked row.
///
/// Rows with `mask[i] == false` are returned untouched.
pub fn regularize_scores(scores: &Tensor, mask: &[bool], unrelated: &[usize]) -> Result<Tensor> {
    let (_, d) = check(scores, mask, unrelated)?;
    if covers_all(unrelated, d) {
        return Err(Error::AllTokensRegularized);
    }
    let mut out = scores.clone();
    for (row, _) in out
        .data_mut()
        .chunks_exact_mut(d)
        .zip(mask)
        .filter(|(_, &m)| m)
    {
        regularize_row(row, unrelated);
    }
    Ok(out)
}

/// Promote the related tokens `related` at every masked row.
pub fn reward_scores(scores: &Tensor, mask: &[bool], related: &[usize]) -> Result<Tensor> {
    let (_, d) = check(scores, mask, related)?;
    if related.is_empty() {
        return Err(Error::NoRelatedTokens);
    }
    let mut out = scores.clone();
    for (row, _) in out
        .data_mut()
        .chunks_exact_mut(d)
        .zip(mask)
        .filter(|(_, &m)| m)
    {
        reward_row(row, related);
    }
    Ok(out)
}

pub(crate) fn covers_all(tokens: &[usize], d: usize) -> bool {
    let mut seen = vec![false; d];
    for &t in tokens {
        if t < d {
            seen[t] = true;
        }
    }
    seen.iter().all(|&s| s)
}
