//! Deterministic vector primitives shared by every other module.
//!
//! Storage is `f32`; every reduction (dot products, norms, means) accumulates
//! in `f64` so results are stable across platforms at the tolerances the
//! rest of the crate relies on.

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Norms below this are treated as zero.
pub const ZERO_NORM_EPS: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum VectorError {
    #[error("vector has zero norm")]
    ZeroNorm,
    #[error("vector contains a non-finite entry")]
    NonFinite,
    #[error("dimension mismatch: {left} vs {right}")]
    DimMismatch { left: usize, right: usize },
    #[error("empty input")]
    EmptyInput,
}

/// One entry of a ranked score list.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Scored {
    pub index: usize,
    pub score: f64,
}

fn check_finite(v: &[f32]) -> Result<(), VectorError> {
    if v.iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(VectorError::NonFinite)
    }
}

fn check_dims(a: &[f32], b: &[f32]) -> Result<(), VectorError> {
    if a.len() != b.len() {
        return Err(VectorError::DimMismatch {
            left: a.len(),
            right: b.len(),
        });
    }
    Ok(())
}

/// Squared L2 norm accumulated in f64.
pub fn norm_sq(v: &[f32]) -> f64 {
    v.iter().map(|&x| f64::from(x) * f64::from(x)).sum()
}

pub fn norm(v: &[f32]) -> f64 {
    norm_sq(v).sqrt()
}

/// Dot product accumulated in f64.
pub fn dot(a: &[f32], b: &[f32]) -> Result<f64, VectorError> {
    check_dims(a, b)?;
    Ok(a
        .iter()
        .zip(b)
        .map(|(&x, &y)| f64::from(x) * f64::from(y))
        .sum())
}

pub fn l2_normalize(v: &[f32]) -> Result<Vec<f32>, VectorError> {
    if v.is_empty() {
        return Err(VectorError::EmptyInput);
    }
    check_finite(v)?;
    let n = norm(v);
    if n < ZERO_NORM_EPS {
        return Err(VectorError::ZeroNorm);
    }
    Ok(v.iter().map(|&x| (f64::from(x) / n) as f32).collect())
}

/// Cosine similarity, clamped to `[-1, 1]`.
///
/// Symmetric bit-for-bit: the products and the norm product are both
/// commutative in IEEE arithmetic.
pub fn cosine(a: &[f32], b: &[f32]) -> Result<f64, VectorError> {
    check_dims(a, b)?;
    check_finite(a)?;
    check_finite(b)?;
    let na = norm_sq(a);
    let nb = norm_sq(b);
    if na.sqrt() < ZERO_NORM_EPS || nb.sqrt() < ZERO_NORM_EPS {
        return Err(VectorError::ZeroNorm);
    }
    let d = dot(a, b)?;
    Ok((d / (na.sqrt() * nb.sqrt())).clamp(-1.0, 1.0))
}

/// Arithmetic mean of `rows` (f64 accumulation), renormalized to unit length.
pub fn mean_vector<R: AsRef<[f32]>>(rows: &[R]) -> Result<Vec<f32>, VectorError> {
    let first = rows.first().ok_or(VectorError::EmptyInput)?.as_ref();
    let dims = first.len();
    if dims == 0 {
        return Err(VectorError::EmptyInput);
    }
    let mut acc = vec![0.0f64; dims];
    for row in rows {
        let row = row.as_ref();
        check_dims(first, row)?;
        check_finite(row)?;
        for (a, &x) in acc.iter_mut().zip(row) {
            *a += f64::from(x);
        }
    }
    let count = rows.len() as f64;
    acc.iter_mut().for_each(|a| *a /= count);
    let n = acc.iter().map(|a| a * a).sum::<f64>().sqrt();
    if n < ZERO_NORM_EPS {
        return Err(VectorError::ZeroNorm);
    }
    Ok(acc.iter().map(|a| (a / n) as f32).collect())
}

/// Descending by score, ascending by index on ties.
pub fn rank_order(a: &Scored, b: &Scored) -> Ordering {
    b.score
        .total_cmp(&a.score)
        .then_with(|| a.index.cmp(&b.index))
}

/// The `k` highest scores, sorted descending; ties go to the lower index.
pub fn top_k(scores: &[f64], k: usize) -> Vec<Scored> {
    let mut all: Vec<Scored> = scores
        .iter()
        .enumerate()
        .map(|(index, &score)| Scored { index, score })
        .collect();
    let k = k.min(all.len());
    if k == 0 {
        return Vec::new();
    }
    if k < all.len() {
        all.select_nth_unstable_by(k - 1, rank_order);
        all.truncate(k);
    }
    all.sort_by(rank_order);
    all
}
