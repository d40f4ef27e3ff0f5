//! Cosine similarity to each anchor centroid, combined by a two-way softmax.

use rayon::prelude::*;
use serde::Serialize;
use thiserror::Error;

use crate::aggregation::CentroidPair;
use crate::store::EmbeddingDataset;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ScoreError {
    #[error("dimension mismatch: embedding has {got}, centroids have {expected}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("vector has zero norm")]
    ZeroNorm,
    #[error("vector has non-finite components")]
    NonFinite,
}

/// Similarities to both centroids and the resulting score.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ScoreComponents {
    pub s_high: f64,
    pub s_low: f64,
    pub score: f64,
}

/// A per-record failure inside a batch.
#[derive(Debug, Clone, PartialEq)]
pub struct RecordError {
    pub index: usize,
    pub id: String,
    pub error: ScoreError,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct BatchScores {
    /// Successful scores in input order.
    pub scores: Vec<(String, ScoreComponents)>,
    pub errors: Vec<RecordError>,
}

fn norm<T: Copy + Into<f64>>(v: &[T]) -> f64 {
    v.iter().map(|&x| x.into() * x.into()).sum::<f64>().sqrt()
}

/// `<x, c> / (|x| |c|)`, clamped to [-1, 1].
pub fn cosine_similarity<A, B>(x: &[A], c: &[B]) -> Result<f64, ScoreError>
where
    A: Copy + Into<f64>,
    B: Copy + Into<f64>,
{
    if x.len() != c.len() {
        return Err(ScoreError::DimensionMismatch {
            expected: c.len(),
            got: x.len(),
        });
    }
    let (nx, nc) = (norm(x), norm(c));
    if !nx.is_finite() || !nc.is_finite() {
        return Err(ScoreError::NonFinite);
    }
    if nx == 0.0 || nc == 0.0 {
        return Err(ScoreError::ZeroNorm);
    }
    let dot: f64 = x.iter().zip(c).map(|(&a, &b)| a.into() * b.into()).sum();
    Ok((dot / (nx * nc)).clamp(-1.0, 1.0))
}

/// Softmax over the two similarities, in the stable logistic form
/// `1 / (1 + exp(s_low - s_high))`.
pub fn softmax_score(s_high: f64, s_low: f64) -> f64 {
    1.0 / (1.0 + (s_low - s_high).exp())
}

/// Scores one embedding against a centroid pair. The embedding is not
/// normalized first; cosine similarity is scale invariant.
pub fn score_embedding<T: Copy + Into<f64>>(
    x: &[T],
    pair: &CentroidPair,
) -> Result<ScoreComponents, ScoreError> {
    let s_high = cosine_similarity(x, pair.c_high())?;
    let s_low = cosine_similarity(x, pair.c_low())?;
    Ok(ScoreComponents {
        s_high,
        s_low,
        score: softmax_score(s_high, s_low),
    })
}

/// Scores every record. A dataset/centroid dimension mismatch aborts;
/// per-record failures such as zero-norm embeddings are collected.
pub fn score_batch(
    dataset: &EmbeddingDataset,
    pair: &CentroidPair,
) -> Result<BatchScores, ScoreError> {
    if dataset.dim() != pair.dim() {
        return Err(ScoreError::DimensionMismatch {
            expected: pair.dim(),
            got: dataset.dim(),
        });
    }
    let results: Vec<_> = dataset
        .records()
        .par_iter()
        .map(|r| score_embedding(&r.embedding, pair))
        .collect();
    let mut batch = BatchScores::default();
    for (index, (record, result)) in dataset.records().iter().zip(results).enumerate() {
        match result {
            Ok(components) => batch.scores.push((record.id.clone(), components)),
            Err(error) => batch.errors.push(RecordError {
                index,
                id: record.id.clone(),
                error,
            }),
        }
    }
    Ok(batch)
}
