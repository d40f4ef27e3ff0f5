//! Agreement between predicted scores and mean opinion scores.

use std::fmt;
use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::aggregation::CentroidPair;
use crate::correlation::{krcc, plcc, srcc, CorrelationError};
use crate::scoring::{score_batch, RecordError, ScoreError};
use crate::store::EmbeddingDataset;

#[derive(Debug, Error)]
pub enum EvaluationError {
    #[error("record {id:?} has no mos")]
    MissingMos { id: String },
    #[error("only {0} records could be scored, need at least 2")]
    TooFewScored(usize),
    #[error(transparent)]
    Score(#[from] ScoreError),
    #[error("{measure}: {source}")]
    Correlation {
        measure: Measure,
        #[source]
        source: CorrelationError,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Measure {
    Srcc,
    Krcc,
    Plcc,
}

impl fmt::Display for Measure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Measure::Srcc => "srcc",
            Measure::Krcc => "krcc",
            Measure::Plcc => "plcc",
        })
    }
}

impl FromStr for Measure {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "srcc" => Ok(Measure::Srcc),
            "krcc" => Ok(Measure::Krcc),
            "plcc" => Ok(Measure::Plcc),
            other => Err(format!(
                "unknown measure {other:?}, expected srcc, krcc or plcc"
            )),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageScore {
    pub id: String,
    pub score: f64,
    pub mos: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationReport {
    pub n: usize,
    pub srcc: f64,
    pub krcc: Option<f64>,
    pub plcc: Option<f64>,
    pub per_image: Vec<ImageScore>,
    /// Records that could not be scored, such as zero-norm embeddings.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub skipped: Vec<String>,
}

/// Scores every record and correlates the scores with MOS. SRCC is always
/// computed; KRCC and PLCC only when requested.
///
/// Coefficients are computed over records sorted by id, so the report's
/// coefficients do not depend on record order. `per_image` keeps input order.
pub fn evaluate(
    dataset: &EmbeddingDataset,
    pair: &CentroidPair,
    measures: &[Measure],
) -> Result<EvaluationReport, EvaluationError> {
    if let Some(r) = dataset.records().iter().find(|r| r.mos.is_none()) {
        return Err(EvaluationError::MissingMos { id: r.id.clone() });
    }
    let batch = score_batch(dataset, pair)?;
    let mos_of = dataset
        .records()
        .iter()
        .map(|r| (r.id.as_str(), r.mos.unwrap()))
        .collect::<std::collections::HashMap<_, _>>();
    let per_image: Vec<ImageScore> = batch
        .scores
        .iter()
        .map(|(id, c)| ImageScore {
            id: id.clone(),
            score: c.score,
            mos: mos_of[id.as_str()],
        })
        .collect();
    if per_image.len() < 2 {
        return Err(EvaluationError::TooFewScored(per_image.len()));
    }

    let mut sorted: Vec<&ImageScore> = per_image.iter().collect();
    sorted.sort_by(|a, b| a.id.cmp(&b.id));
    let scores: Vec<f64> = sorted.iter().map(|s| s.score).collect();
    let mos: Vec<f64> = sorted.iter().map(|s| s.mos).collect();
    let run = |measure: Measure, f: fn(&[f64], &[f64]) -> Result<f64, CorrelationError>| {
        f(&scores, &mos).map_err(|source| EvaluationError::Correlation { measure, source })
    };

    let srcc = run(Measure::Srcc, srcc)?;
    let krcc = measures
        .contains(&Measure::Krcc)
        .then(|| run(Measure::Krcc, krcc))
        .transpose()?;
    let plcc = measures
        .contains(&Measure::Plcc)
        .then(|| run(Measure::Plcc, plcc))
        .transpose()?;

    Ok(EvaluationReport {
        n: per_image.len(),
        srcc,
        krcc,
        plcc,
        per_image,
        skipped: batch
            .errors
            .into_iter()
            .map(|RecordError { id, .. }| id)
            .collect(),
    })
}

impl EvaluationReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    /// Writes `id,score,mos` rows.
    pub fn write_csv(&self, path: &Path) -> io::Result<()> {
        let mut out = BufWriter::new(File::create(path)?);
        writeln!(out, "id,score,mos")?;
        for row in &self.per_image {
            writeln!(out, "{},{},{}", csv_field(&row.id), row.score, row.mos)?;
        }
        out.flush()
    }
}

pub(crate) fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n', '\r']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::aggregation::PairOrigin;
    use crate::store::EmbeddingRecord;

    fn pair() -> CentroidPair {
        CentroidPair::new(
            vec![1.0, 0.0],
            vec![0.0, 1.0],
            PairOrigin::External("t".into()),
            "",
        )
        .unwrap()
    }

    /// Embeddings at angle t in [0, pi/2]; the score falls as t grows.
    fn dataset(mos: impl Fn(usize) -> f64) -> EmbeddingDataset {
        let records = (0..20).map(|i| {
            let t = i as f64 / 19.0 * std::f64::consts::FRAC_PI_2;
            EmbeddingRecord::new(format!("img{i:02}"), vec![t.cos() as f32, t.sin() as f32])
                .with_mos(mos(i))
        });
        EmbeddingDataset::from_records(2, "eval", records).unwrap()
    }

    #[test]
    fn identity_ordering_gives_one() {
        let d = dataset(|i| 20.0 - i as f64);
        let report = evaluate(&d, &pair(), &[Measure::Krcc, Measure::Plcc]).unwrap();
        assert_eq!(report.srcc, 1.0);
        assert_eq!(report.krcc, Some(1.0));
        assert!(report.plcc.unwrap() > 0.9);
        assert_eq!(report.n, 20);
        assert_eq!(report.per_image[3].id, "img03");
    }

    #[test]
    fn negated_mos_flips_sign() {
        let mos = |i: usize| ((i * 7) % 11) as f64;
        let a = evaluate(&dataset(mos), &pair(), &[]).unwrap();
        let b = evaluate(&dataset(|i| -mos(i)), &pair(), &[]).unwrap();
        assert_eq!(a.srcc, -b.srcc);
        assert_eq!(a.krcc, None);
    }

    #[test]
    fn record_order_does_not_matter() {
        let d = dataset(|i| ((i * 7) % 11) as f64);
        let mut records = d.records().to_vec();
        records.reverse();
        let r = EmbeddingDataset::from_records(2, "rev", records).unwrap();
        let measures = [Measure::Srcc, Measure::Krcc, Measure::Plcc];
        let a = evaluate(&d, &pair(), &measures).unwrap();
        let b = evaluate(&r, &pair(), &measures).unwrap();
        assert_eq!((a.srcc, a.krcc, a.plcc), (b.srcc, b.krcc, b.plcc));
    }

    #[test]
    fn errors() {
        let constant = dataset(|_| 3.0);
        assert!(matches!(
            evaluate(&constant, &pair(), &[]),
            Err(EvaluationError::Correlation {
                source: CorrelationError::Constant,
                ..
            })
        ));
        let mut records = dataset(|i| i as f64).into_records();
        records[5].mos = None;
        let missing = EmbeddingDataset::from_records(2, "m", records).unwrap();
        assert!(matches!(
            evaluate(&missing, &pair(), &[]),
            Err(EvaluationError::MissingMos { id }) if id == "img05"
        ));
        let one = EmbeddingDataset::from_records(
            2,
            "one",
            [
                EmbeddingRecord::new("a", vec![1.0, 0.0]).with_mos(1.0),
                EmbeddingRecord::new("z", vec![0.0, 0.0]).with_mos(2.0),
            ],
        )
        .unwrap();
        assert!(matches!(
            evaluate(&one, &pair(), &[]),
            Err(EvaluationError::TooFewScored(1))
        ));
    }

    #[test]
    fn report_serializes() {
        let d = dataset(|i| i as f64);
        let report = evaluate(&d, &pair(), &[Measure::Plcc]).unwrap();
        let v: serde_json::Value = serde_json::from_str(&report.to_json()).unwrap();
        assert_eq!(v["n"], 20);
        assert!(v["krcc"].is_null());
        assert_eq!(v["per_image"].as_array().unwrap().len(), 20);
        let back: EvaluationReport = serde_json::from_str(&report.to_json()).unwrap();
        assert_eq!(back, report);

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("r.csv");
        report.write_csv(&path).unwrap();
        let text = std::fs::read_to_string(path).unwrap();
        assert_eq!(text.lines().count(), 21);
        assert!(text.starts_with("id,score,mos\nimg00,"));
    }
}
