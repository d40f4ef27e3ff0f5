//! Ablation sweeps over anchor fraction, offset, and cluster count.
//!
//! Sweep points run in parallel; rows are always emitted in
//! (axis value, eval set) order so outputs are byte-for-byte reproducible.
//! `std_srcc` is the population standard deviation over repeats.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::aggregation::{build_centroid_pair, AggregationMethod, AggregationSpec};
use crate::evaluation::evaluate;
use crate::kmeans::KMeansConfig;
use crate::store::{
    load_dataset, subsample, AnchorSubset, EmbeddingDataset, Format, SplitMethod, StoreError,
};

pub const DEFAULT_REPEATS: usize = 10;

#[derive(Debug, Error)]
pub enum SweepError {
    #[error("invalid sweep config: {0}")]
    Config(String),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("loading {path}: {source}")]
    Load {
        path: PathBuf,
        #[source]
        source: StoreError,
    },
    #[error("splitting anchors: {0}")]
    Split(#[source] StoreError),
    #[error("fraction {fraction}, repeat {repeat} (seed {seed}): {message}")]
    Repeat {
        fraction: f64,
        repeat: usize,
        seed: u64,
        message: String,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SweepAxis {
    Fraction,
    Offset,
    Clusters,
}

impl fmt::Display for SweepAxis {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SweepAxis::Fraction => "fraction",
            SweepAxis::Offset => "offset",
            SweepAxis::Clusters => "clusters",
        })
    }
}

fn default_repeats() -> usize {
    DEFAULT_REPEATS
}

/// A sweep as read from a JSON or TOML file. Relative paths are resolved
/// against the file's directory by [`SweepConfig::load`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepConfig {
    pub axis: SweepAxis,
    pub values: Vec<f64>,
    #[serde(default = "default_repeats")]
    pub repeats: usize,
    pub base_seed: u64,
    pub spec_template: AggregationSpec,
    pub anchor_source: PathBuf,
    #[serde(default)]
    pub anchor_split: SplitMethod,
    pub eval_sets: Vec<PathBuf>,
}

impl SweepConfig {
    pub fn load(path: &Path) -> Result<Self, SweepError> {
        let text = fs::read_to_string(path).map_err(|source| SweepError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        let is_toml = path
            .extension()
            .is_some_and(|e| e.eq_ignore_ascii_case("toml"));
        let mut config: SweepConfig = if is_toml {
            toml::from_str(&text).map_err(|e| SweepError::Config(e.to_string()))?
        } else {
            serde_json::from_str(&text).map_err(|e| SweepError::Config(e.to_string()))?
        };
        let base = path.parent().unwrap_or(Path::new(""));
        config.anchor_source = base.join(&config.anchor_source);
        for p in &mut config.eval_sets {
            *p = base.join(&*p);
        }
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<(), SweepError> {
        let bad = |m: String| Err(SweepError::Config(m));
        if self.values.is_empty() {
            return bad("values must not be empty".into());
        }
        if self.values.windows(2).any(|w| w[0] >= w[1]) {
            return bad("values must be strictly increasing".into());
        }
        if self.repeats == 0 {
            return bad("repeats must be at least 1".into());
        }
        if self.eval_sets.is_empty() {
            return bad("eval_sets must not be empty".into());
        }
        for &v in &self.values {
            let ok = match self.axis {
                SweepAxis::Fraction => v > 0.0 && v <= 1.0,
                SweepAxis::Offset => (0.0..0.5).contains(&v),
                SweepAxis::Clusters => v >= 1.0 && v.fract() == 0.0,
            };
            if !ok {
                return bad(format!("value {v} is not valid on the {} axis", self.axis));
            }
        }
        Ok(())
    }

    /// Loads and splits the anchor pool and loads every eval set.
    pub fn load_inputs(&self) -> Result<SweepInputs, SweepError> {
        let load = |path: &PathBuf| {
            load_dataset(path, Format::from_path(path)).map_err(|source| SweepError::Load {
                path: path.clone(),
                source,
            })
        };
        let anchors = load(&self.anchor_source)?;
        let (high, low) = self
            .anchor_split
            .split(&anchors)
            .map_err(SweepError::Split)?;
        let eval_sets = self
            .eval_sets
            .iter()
            .map(|p| {
                let name = p
                    .file_stem()
                    .map(|s| s.to_string_lossy().into_owned())
                    .unwrap_or_else(|| p.display().to_string());
                Ok((name, load(p)?))
            })
            .collect::<Result<_, SweepError>>()?;
        Ok(SweepInputs {
            high,
            low,
            eval_sets,
        })
    }
}

/// In-memory anchors and named evaluation sets for a sweep.
#[derive(Debug, Clone)]
pub struct SweepInputs {
    pub high: AnchorSubset,
    pub low: AnchorSubset,
    pub eval_sets: Vec<(String, EmbeddingDataset)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalSetSummary {
    pub name: String,
    pub mean_srcc: Option<f64>,
    pub std_srcc: Option<f64>,
    pub repeats: usize,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepResult {
    pub axis_value: f64,
    pub per_eval_set: Vec<EvalSetSummary>,
}

impl SweepResult {
    pub fn has_errors(&self) -> bool {
        self.per_eval_set.iter().any(|s| s.error.is_some())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepReport {
    pub axis: SweepAxis,
    pub results: Vec<SweepResult>,
}

/// Population mean and standard deviation (Welford). Identical inputs give a
/// mean equal to that value and a standard deviation of exactly zero.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let (mut mean, mut m2) = (0.0, 0.0);
    for (i, &x) in values.iter().enumerate() {
        let delta = x - mean;
        mean += delta / (i + 1) as f64;
        m2 += delta * (x - mean);
    }
    (mean, (m2 / values.len() as f64).sqrt())
}

/// SRCC of a centroid pair built from `spec` on each eval set.
fn srcc_per_set(
    spec: &AggregationSpec,
    high: &AnchorSubset,
    low: &AnchorSubset,
    eval_sets: &[(String, EmbeddingDataset)],
) -> Result<Vec<Result<f64, String>>, String> {
    let pair = build_centroid_pair(spec, high, low).map_err(|e| e.to_string())?;
    Ok(eval_sets
        .iter()
        .map(|(_, d)| {
            evaluate(d, &pair, &[])
                .map(|r| r.srcc)
                .map_err(|e| e.to_string())
        })
        .collect())
}

fn summarize(
    axis_value: f64,
    eval_sets: &[(String, EmbeddingDataset)],
    runs: Vec<Result<Vec<Result<f64, String>>, String>>,
) -> SweepResult {
    let per_eval_set = eval_sets
        .iter()
        .enumerate()
        .map(|(k, (name, _))| {
            let mut srccs = Vec::with_capacity(runs.len());
            let mut error = None;
            for run in &runs {
                match run.as_ref().map(|per_set| &per_set[k]) {
                    Ok(Ok(v)) => srccs.push(*v),
                    Ok(Err(e)) | Err(e) => {
                        error.get_or_insert_with(|| e.clone());
                    }
                }
            }
            match error {
                Some(e) => EvalSetSummary {
                    name: name.clone(),
                    mean_srcc: None,
                    std_srcc: None,
                    repeats: runs.len(),
                    error: Some(e),
                },
                None => {
                    let (mean, std) = mean_std(&srccs);
                    EvalSetSummary {
                        name: name.clone(),
                        mean_srcc: Some(mean),
                        std_srcc: Some(std),
                        repeats: srccs.len(),
                        error: None,
                    }
                }
            }
        })
        .collect();
    SweepResult {
        axis_value,
        per_eval_set,
    }
}

fn with_kmeans_seed(spec: &AggregationSpec, seed: u64) -> AggregationSpec {
    let mut spec = *spec;
    if let AggregationMethod::KMeans(ref mut c) = spec.method {
        c.seed = seed;
    }
    spec
}

fn expect_axis(config: &SweepConfig, axis: SweepAxis) -> Result<(), SweepError> {
    if config.axis != axis {
        return Err(SweepError::Config(format!(
            "config axis is {}, expected {axis}",
            config.axis
        )));
    }
    config.validate()
}

/// For each fraction and repeat `r`, subsamples both anchor subsets with
/// seed `base_seed + r` (also used as the k-means seed), builds a pair, and
/// evaluates every eval set. Any failing repeat aborts the sweep.
pub fn sweep_fraction(
    config: &SweepConfig,
    inputs: &SweepInputs,
) -> Result<Vec<SweepResult>, SweepError> {
    expect_axis(config, SweepAxis::Fraction)?;
    let jobs: Vec<(usize, usize)> = (0..config.values.len())
        .flat_map(|v| (0..config.repeats).map(move |r| (v, r)))
        .collect();
    let outcomes: Vec<Result<Vec<f64>, SweepError>> = jobs
        .par_iter()
        .map(|&(v, r)| {
            let fraction = config.values[v];
            let seed = config.base_seed.wrapping_add(r as u64);
            let fail = |message: String| SweepError::Repeat {
                fraction,
                repeat: r,
                seed,
                message,
            };
            let high = subsample(&inputs.high, fraction, seed).map_err(|e| fail(e.to_string()))?;
            let low = subsample(&inputs.low, fraction, seed).map_err(|e| fail(e.to_string()))?;
            let spec = with_kmeans_seed(&config.spec_template, seed);
            srcc_per_set(&spec, &high, &low, &inputs.eval_sets)
                .map_err(fail)?
                .into_iter()
                .collect::<Result<Vec<f64>, String>>()
                .map_err(fail)
        })
        .collect();

    let mut outcomes = outcomes.into_iter();
    let mut results = Vec::with_capacity(config.values.len());
    for &fraction in &config.values {
        let runs = (0..config.repeats)
            .map(|_| outcomes.next().expect("one outcome per job"))
            .map(|o| o.map(|v| v.into_iter().map(Ok).collect()))
            .collect::<Result<Vec<_>, _>>()?;
        results.push(summarize(
            fraction,
            &inputs.eval_sets,
            runs.into_iter().map(Ok).collect(),
        ));
    }
    Ok(results)
}

/// One offset-aggregated pair per value. Offset aggregation is deterministic,
/// so each point runs once; failures become error rows.
pub fn sweep_offset(
    config: &SweepConfig,
    inputs: &SweepInputs,
) -> Result<Vec<SweepResult>, SweepError> {
    expect_axis(config, SweepAxis::Offset)?;
    Ok(config
        .values
        .par_iter()
        .map(|&offset| {
            let spec = AggregationSpec {
                method: AggregationMethod::Offset {
                    offset_fraction: offset,
                },
                normalize_inputs: config.spec_template.normalize_inputs,
            };
            let run = srcc_per_set(&spec, &inputs.high, &inputs.low, &inputs.eval_sets);
            summarize(offset, &inputs.eval_sets, vec![run])
        })
        .collect())
}

/// k-means aggregation with each cluster count, repeated over seeds
/// `base_seed + r`. Iteration limits come from the template when it is a
/// k-means spec. Failures become error rows.
pub fn sweep_clusters(
    config: &SweepConfig,
    inputs: &SweepInputs,
) -> Result<Vec<SweepResult>, SweepError> {
    expect_axis(config, SweepAxis::Clusters)?;
    let template = match config.spec_template.method {
        AggregationMethod::KMeans(c) => c,
        _ => KMeansConfig::new(1, config.base_seed),
    };
    let jobs: Vec<(usize, usize)> = (0..config.values.len())
        .flat_map(|v| (0..config.repeats).map(move |r| (v, r)))
        .collect();
    let mut runs = jobs
        .par_iter()
        .map(|&(v, r)| {
            let spec = AggregationSpec {
                method: AggregationMethod::KMeans(KMeansConfig {
                    n_clusters: config.values[v] as usize,
                    seed: config.base_seed.wrapping_add(r as u64),
                    ..template
                }),
                normalize_inputs: config.spec_template.normalize_inputs,
            };
            srcc_per_set(&spec, &inputs.high, &inputs.low, &inputs.eval_sets)
        })
        .collect::<Vec<_>>()
        .into_iter();
    Ok(config
        .values
        .iter()
        .map(|&k| {
            let chunk = runs.by_ref().take(config.repeats).collect();
            summarize(k, &inputs.eval_sets, chunk)
        })
        .collect())
}

pub fn run_sweep(config: &SweepConfig, inputs: &SweepInputs) -> Result<SweepReport, SweepError> {
    let results = match config.axis {
        SweepAxis::Fraction => sweep_fraction(config, inputs)?,
        SweepAxis::Offset => sweep_offset(config, inputs)?,
        SweepAxis::Clusters => sweep_clusters(config, inputs)?,
    };
    Ok(SweepReport {
        axis: config.axis,
        results,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ResultFormat {
    Csv,
    Json,
}

impl ResultFormat {
    pub fn from_path(path: &Path) -> ResultFormat {
        match path.extension().and_then(|e| e.to_str()) {
            Some(e) if e.eq_ignore_ascii_case("json") => ResultFormat::Json,
            _ => ResultFormat::Csv,
        }
    }
}

pub const RESULT_COLUMNS: [&str; 7] = [
    "axis",
    "axis_value",
    "eval_set",
    "mean_srcc",
    "std_srcc",
    "repeats",
    "error",
];

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ResultRow {
    axis: SweepAxis,
    axis_value: f64,
    eval_set: String,
    mean_srcc: Option<f64>,
    std_srcc: Option<f64>,
    repeats: usize,
    error: Option<String>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ResultFile {
    axis: SweepAxis,
    std: String,
    rows: Vec<ResultRow>,
}

impl SweepReport {
    fn rows(&self) -> Vec<ResultRow> {
        self.results
            .iter()
            .flat_map(|r| {
                r.per_eval_set.iter().map(move |s| ResultRow {
                    axis: self.axis,
                    axis_value: r.axis_value,
                    eval_set: s.name.clone(),
                    mean_srcc: s.mean_srcc,
                    std_srcc: s.std_srcc,
                    repeats: s.repeats,
                    error: s.error.clone(),
                })
            })
            .collect()
    }

    pub fn has_errors(&self) -> bool {
        self.results.iter().any(SweepResult::has_errors)
    }

    pub fn to_csv(&self) -> String {
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        let mut writer = csv::Writer::from_writer(Vec::new());
        writer
            .write_record(RESULT_COLUMNS)
            .expect("in-memory write");
        for row in self.rows() {
            writer
                .write_record([
                    row.axis.to_string(),
                    row.axis_value.to_string(),
                    row.eval_set,
                    opt(row.mean_srcc),
                    opt(row.std_srcc),
                    row.repeats.to_string(),
                    row.error.unwrap_or_default(),
                ])
                .expect("in-memory write");
        }
        String::from_utf8(writer.into_inner().expect("in-memory flush")).expect("utf-8 fields")
    }

    pub fn to_json(&self) -> String {
        let file = ResultFile {
            axis: self.axis,
            std: "population".into(),
            rows: self.rows(),
        };
        let mut s = serde_json::to_string_pretty(&file).expect("rows serialize");
        s.push('\n');
        s
    }

    pub fn from_json(text: &str) -> Result<Self, serde_json::Error> {
        let file: ResultFile = serde_json::from_str(text)?;
        let mut results: Vec<SweepResult> = Vec::new();
        for row in file.rows {
            let summary = EvalSetSummary {
                name: row.eval_set,
                mean_srcc: row.mean_srcc,
                std_srcc: row.std_srcc,
                repeats: row.repeats,
                error: row.error,
            };
            match results.last_mut() {
                Some(last) if last.axis_value == row.axis_value => last.per_eval_set.push(summary),
                _ => results.push(SweepResult {
                    axis_value: row.axis_value,
                    per_eval_set: vec![summary],
                }),
            }
        }
        Ok(Self {
            axis: file.axis,
            results,
        })
    }
}

pub fn emit_results(
    report: &SweepReport,
    path: &Path,
    format: ResultFormat,
) -> Result<(), SweepError> {
    let text = match format {
        ResultFormat::Csv => report.to_csv(),
        ResultFormat::Json => report.to_json(),
    };
    fs::write(path, text).map_err(|source| SweepError::Io {
        path: path.to_path_buf(),
        source,
    })
}
