//! Anchor-centroid quality scoring for image embeddings.
//!
//! Labeled anchor pools are reduced to a "high quality" and a "low quality"
//! centroid ([`aggregation`]); any embedding is then scored by the softmax of
//! its cosine similarities to the two centroids ([`scoring`]), and scores are
//! compared with human opinion via rank correlation ([`evaluation`]). The
//! [`harness`] module runs ablation sweeps over the anchor construction.
//!
//! The crate is encoder agnostic: it reads precomputed embeddings in the
//! formats of [`store`].

pub mod aggregation;
pub mod cli;
pub mod correlation;
pub mod evaluation;
pub mod harness;
pub mod kmeans;
pub mod scoring;
pub mod store;
pub mod synthetic;

pub use aggregation::{
    aggregate_kmeans, aggregate_mean, aggregate_offset, build_centroid_pair, load_centroids,
    save_centroids, AggregationMethod, AggregationSpec, CentroidPair, PairOrigin,
};
pub use correlation::{krcc, plcc, rank_with_ties, srcc};
pub use evaluation::{evaluate, EvaluationReport, Measure};
pub use kmeans::{kmeans, KMeansConfig, KMeansResult};
pub use scoring::{cosine_similarity, score_batch, score_embedding, ScoreComponents};
pub use store::{
    load_dataset, save_dataset, split_by_median, split_by_reference_flag, subsample, AnchorLabel,
    AnchorSubset, EmbeddingDataset, EmbeddingRecord, Format, SplitMethod,
};
