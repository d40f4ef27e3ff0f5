//! Aggregation of anchor subsets into the high/low centroid pair.
//!
//! Every method sums records in id order with `f64` accumulators, so a
//! permutation of a subset yields a bitwise-identical centroid.

use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::kmeans::{kmeans, KMeansConfig, KMeansError};
use crate::store::{cmp_mos_id, require_all_mos, AnchorLabel, AnchorSubset, StoreError};

#[derive(Debug, Error)]
pub enum AggregationError {
    #[error("{0} subset is empty")]
    EmptySubset(AnchorLabel),
    #[error("record {id:?} has zero norm and cannot be normalized")]
    ZeroNorm { id: String },
    #[error("offset fraction {0} is outside [0, 0.5)")]
    OffsetOutOfRange(f64),
    #[error("offset {fraction} drops {dropped} records, emptying the {label} subset of {size}")]
    OffsetEmptiesSubset {
        fraction: f64,
        dropped: usize,
        label: AnchorLabel,
        size: usize,
    },
    #[error("subsets differ in dimension: high {high}, low {low}")]
    DimensionMismatch { high: usize, low: usize },
    #[error("{0} centroid has zero norm or non-finite values")]
    DegenerateCentroid(AnchorLabel),
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error("k-means on the {label} subset: {source}")]
    KMeans {
        label: AnchorLabel,
        #[source]
        source: KMeansError,
    },
}

#[derive(Debug, Error)]
pub enum CentroidFileError {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed centroid file: {0}")]
    Malformed(#[from] serde_json::Error),
    #[error("c_high has {high} values and c_low has {low}, declared dim is {dim}")]
    DimensionMismatch { dim: usize, high: usize, low: usize },
    #[error("{0} centroid has zero norm or non-finite values")]
    DegenerateCentroid(AnchorLabel),
}

/// How a subset is reduced to one centroid.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "method", rename_all = "lowercase")]
pub enum AggregationMethod {
    Mean,
    /// Mean after peeling `offset_fraction * (|high| + |low|)` records nearest
    /// the division point off each side.
    Offset {
        offset_fraction: f64,
    },
    /// Unweighted mean of k-means cluster centroids.
    KMeans(KMeansConfig),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AggregationSpec {
    #[serde(flatten)]
    pub method: AggregationMethod,
    #[serde(default = "default_normalize")]
    pub normalize_inputs: bool,
}

fn default_normalize() -> bool {
    true
}

impl AggregationSpec {
    pub fn mean() -> Self {
        Self {
            method: AggregationMethod::Mean,
            normalize_inputs: true,
        }
    }

    pub fn offset(offset_fraction: f64) -> Self {
        Self {
            method: AggregationMethod::Offset { offset_fraction },
            normalize_inputs: true,
        }
    }

    pub fn kmeans(config: KMeansConfig) -> Self {
        Self {
            method: AggregationMethod::KMeans(config),
            normalize_inputs: true,
        }
    }

    pub fn with_normalize(mut self, normalize_inputs: bool) -> Self {
        self.normalize_inputs = normalize_inputs;
        self
    }

    pub fn validate(&self) -> Result<(), AggregationError> {
        match self.method {
            AggregationMethod::Offset { offset_fraction }
                if !(0.0..0.5).contains(&offset_fraction) =>
            {
                Err(AggregationError::OffsetOutOfRange(offset_fraction))
            }
            AggregationMethod::KMeans(c) if c.n_clusters == 0 => Err(AggregationError::KMeans {
                label: AnchorLabel::High,
                source: KMeansError::ZeroClusters,
            }),
            _ => Ok(()),
        }
    }
}

impl fmt::Display for AggregationSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let normalize = self.normalize_inputs;
        match self.method {
            AggregationMethod::Mean => write!(f, "mean(normalize={normalize})"),
            AggregationMethod::Offset { offset_fraction } => {
                write!(
                    f,
                    "offset(fraction={offset_fraction},normalize={normalize})"
                )
            }
            AggregationMethod::KMeans(c) => write!(
                f,
                "kmeans(clusters={},seed={},max_iter={},tol={},normalize={normalize})",
                c.n_clusters, c.seed, c.max_iter, c.tol
            ),
        }
    }
}

impl FromStr for AggregationSpec {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let bad = || format!("unrecognized aggregation description {s:?}");
        let (name, rest) = s.split_once('(').ok_or_else(bad)?;
        let body = rest.strip_suffix(')').ok_or_else(bad)?;
        let mut fields = std::collections::HashMap::new();
        for kv in body.split(',').filter(|kv| !kv.is_empty()) {
            let (k, v) = kv.split_once('=').ok_or_else(bad)?;
            fields.insert(k, v);
        }
        fn get<T: FromStr>(
            fields: &std::collections::HashMap<&str, &str>,
            key: &str,
        ) -> Result<T, String> {
            fields
                .get(key)
                .ok_or_else(|| format!("missing {key}"))?
                .parse()
                .map_err(|_| format!("bad value for {key}"))
        }
        let method = match name {
            "mean" => AggregationMethod::Mean,
            "offset" => AggregationMethod::Offset {
                offset_fraction: get(&fields, "fraction")?,
            },
            "kmeans" => AggregationMethod::KMeans(KMeansConfig {
                n_clusters: get(&fields, "clusters")?,
                seed: get(&fields, "seed")?,
                max_iter: get(&fields, "max_iter")?,
                tol: get(&fields, "tol")?,
            }),
            _ => return Err(bad()),
        };
        Ok(Self {
            method,
            normalize_inputs: get(&fields, "normalize")?,
        })
    }
}

/// What produced a centroid pair: one of our aggregation methods, or an
/// external source such as a pair of text-prompt embeddings.
#[derive(Debug, Clone, PartialEq)]
pub enum PairOrigin {
    Aggregated(AggregationSpec),
    External(String),
}

impl fmt::Display for PairOrigin {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            PairOrigin::Aggregated(spec) => spec.fmt(f),
            PairOrigin::External(s) => f.write_str(s),
        }
    }
}

impl From<&str> for PairOrigin {
    fn from(s: &str) -> Self {
        s.parse()
            .map(PairOrigin::Aggregated)
            .unwrap_or_else(|_| PairOrigin::External(s.to_string()))
    }
}

/// The high- and low-quality anchor centroids.
#[derive(Debug, Clone, PartialEq)]
pub struct CentroidPair {
    c_high: Vec<f64>,
    c_low: Vec<f64>,
    pub origin: PairOrigin,
    pub provenance: String,
}

fn is_usable_centroid(c: &[f64]) -> bool {
    c.iter().all(|v| v.is_finite()) && c.iter().map(|v| v * v).sum::<f64>() > 0.0
}

impl CentroidPair {
    /// Builds a pair, checking both centroids are finite, nonzero, and of
    /// equal length.
    pub fn new(
        c_high: Vec<f64>,
        c_low: Vec<f64>,
        origin: PairOrigin,
        provenance: impl Into<String>,
    ) -> Result<Self, CentroidFileError> {
        if c_high.len() != c_low.len() || c_high.is_empty() {
            return Err(CentroidFileError::DimensionMismatch {
                dim: c_high.len(),
                high: c_high.len(),
                low: c_low.len(),
            });
        }
        if !is_usable_centroid(&c_high) {
            return Err(CentroidFileError::DegenerateCentroid(AnchorLabel::High));
        }
        if !is_usable_centroid(&c_low) {
            return Err(CentroidFileError::DegenerateCentroid(AnchorLabel::Low));
        }
        Ok(Self {
            c_high,
            c_low,
            origin,
            provenance: provenance.into(),
        })
    }

    pub fn c_high(&self) -> &[f64] {
        &self.c_high
    }

    pub fn c_low(&self) -> &[f64] {
        &self.c_low
    }

    pub fn dim(&self) -> usize {
        self.c_high.len()
    }

    /// The same pair with the roles of the centroids exchanged.
    pub fn swapped(&self) -> Self {
        Self {
            c_high: self.c_low.clone(),
            c_low: self.c_high.clone(),
            origin: self.origin.clone(),
            provenance: format!("swapped({})", self.provenance),
        }
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CentroidFile {
    dim: usize,
    c_high: Vec<f64>,
    c_low: Vec<f64>,
    spec: String,
    provenance: String,
}

pub fn save_centroids(pair: &CentroidPair, path: &Path) -> Result<(), CentroidFileError> {
    let file = CentroidFile {
        dim: pair.dim(),
        c_high: pair.c_high.clone(),
        c_low: pair.c_low.clone(),
        spec: pair.origin.to_string(),
        provenance: pair.provenance.clone(),
    };
    let mut text = serde_json::to_string_pretty(&file)?;
    text.push('\n');
    fs::write(path, text).map_err(|source| CentroidFileError::Io {
        path: path.display().to_string(),
        source,
    })
}

pub fn load_centroids(path: &Path) -> Result<CentroidPair, CentroidFileError> {
    let text = fs::read_to_string(path).map_err(|source| CentroidFileError::Io {
        path: path.display().to_string(),
        source,
    })?;
    let file: CentroidFile = serde_json::from_str(&text)?;
    if file.c_high.len() != file.dim || file.c_low.len() != file.dim {
        return Err(CentroidFileError::DimensionMismatch {
            dim: file.dim,
            high: file.c_high.len(),
            low: file.c_low.len(),
        });
    }
    CentroidPair::new(
        file.c_high,
        file.c_low,
        PairOrigin::from(file.spec.as_str()),
        file.provenance,
    )
}

/// Records of a subset in id order, widened to `f64` and optionally scaled
/// to unit norm.
fn prepared_points(
    subset: &AnchorSubset,
    normalize: bool,
) -> Result<Vec<Vec<f64>>, AggregationError> {
    if subset.is_empty() {
        return Err(AggregationError::EmptySubset(subset.label));
    }
    let mut order: Vec<_> = subset.records.iter().collect();
    order.sort_by(|a, b| a.id.cmp(&b.id));
    order
        .into_iter()
        .map(|r| {
            let v: Vec<f64> = r.embedding.iter().map(|&x| x as f64).collect();
            if !normalize {
                return Ok(v);
            }
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm == 0.0 {
                return Err(AggregationError::ZeroNorm { id: r.id.clone() });
            }
            Ok(v.into_iter().map(|x| x / norm).collect())
        })
        .collect()
}

fn mean_of(points: &[Vec<f64>]) -> Vec<f64> {
    let mut sum = vec![0.0f64; points[0].len()];
    for p in points {
        for (s, v) in sum.iter_mut().zip(p) {
            *s += v;
        }
    }
    let n = points.len() as f64;
    sum.into_iter().map(|s| s / n).collect()
}

/// Arithmetic mean of the subset's (optionally unit-normalized) embeddings.
/// The result is not re-normalized.
pub fn aggregate_mean(
    subset: &AnchorSubset,
    normalize: bool,
) -> Result<Vec<f64>, AggregationError> {
    Ok(mean_of(&prepared_points(subset, normalize)?))
}

/// Mean aggregation after discarding, from each side, the
/// `floor(offset_fraction * (|high| + |low|))` records closest to the
/// division point: the lowest-MOS records of High and the highest-MOS
/// records of Low.
pub fn aggregate_offset(
    high: &AnchorSubset,
    low: &AnchorSubset,
    offset_fraction: f64,
    normalize: bool,
) -> Result<(Vec<f64>, Vec<f64>), AggregationError> {
    if !(0.0..0.5).contains(&offset_fraction) {
        return Err(AggregationError::OffsetOutOfRange(offset_fraction));
    }
    for subset in [high, low] {
        if subset.is_empty() {
            return Err(AggregationError::EmptySubset(subset.label));
        }
        require_all_mos(&subset.records)?;
    }
    let n = high.len() + low.len();
    let dropped = (offset_fraction * n as f64).floor() as usize;
    for subset in [high, low] {
        if dropped >= subset.len() {
            return Err(AggregationError::OffsetEmptiesSubset {
                fraction: offset_fraction,
                dropped,
                label: subset.label,
                size: subset.len(),
            });
        }
    }
    if dropped == 0 {
        return Ok((
            aggregate_mean(high, normalize)?,
            aggregate_mean(low, normalize)?,
        ));
    }

    let mut high_sorted = high.records.clone();
    high_sorted.sort_by(cmp_mos_id);
    let high_kept = high_sorted.split_off(dropped);

    let mut low_kept = low.records.clone();
    low_kept.sort_by(cmp_mos_id);
    low_kept.truncate(low_kept.len() - dropped);

    Ok((
        aggregate_mean(
            &AnchorSubset::new(high.label, high.dim, high_kept),
            normalize,
        )?,
        aggregate_mean(&AnchorSubset::new(low.label, low.dim, low_kept), normalize)?,
    ))
}

/// Clusters the subset and returns the unweighted mean of the cluster
/// centroids, so sparse regions of the pool count as much as dense ones.
pub fn aggregate_kmeans(
    subset: &AnchorSubset,
    config: &KMeansConfig,
    normalize: bool,
) -> Result<Vec<f64>, AggregationError> {
    let points = prepared_points(subset, normalize)?;
    let result = kmeans(&points, config).map_err(|source| AggregationError::KMeans {
        label: subset.label,
        source,
    })?;
    Ok(mean_of(&result.centroids))
}

pub fn build_centroid_pair(
    spec: &AggregationSpec,
    high: &AnchorSubset,
    low: &AnchorSubset,
) -> Result<CentroidPair, AggregationError> {
    spec.validate()?;
    if high.dim != low.dim {
        return Err(AggregationError::DimensionMismatch {
            high: high.dim,
            low: low.dim,
        });
    }
    let normalize = spec.normalize_inputs;
    let (c_high, c_low) = match &spec.method {
        AggregationMethod::Mean => (
            aggregate_mean(high, normalize)?,
            aggregate_mean(low, normalize)?,
        ),
        AggregationMethod::Offset { offset_fraction } => {
            aggregate_offset(high, low, *offset_fraction, normalize)?
        }
        AggregationMethod::KMeans(config) => (
            aggregate_kmeans(high, config, normalize)?,
            aggregate_kmeans(low, config, normalize)?,
        ),
    };
    if !is_usable_centroid(&c_high) {
        return Err(AggregationError::DegenerateCentroid(AnchorLabel::High));
    }
    if !is_usable_centroid(&c_low) {
        return Err(AggregationError::DegenerateCentroid(AnchorLabel::Low));
    }
    Ok(CentroidPair {
        c_high,
        c_low,
        origin: PairOrigin::Aggregated(*spec),
        provenance: format!("high={} low={}", high.len(), low.len()),
    })
}
