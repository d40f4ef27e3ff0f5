//! Embedding datasets, their on-disk formats, and anchor pool splitting.
//!
//! Two formats are supported:
//!
//! * **QSEB**, a little-endian binary payload of `f32` embeddings with a JSON
//!   lines sidecar (`<path>.meta.jsonl`) carrying per-record metadata.
//! * **CSV** with a header `id,mos,is_reference,e0,...,e{D-1}`.

use std::cmp::Ordering;
use std::collections::HashSet;
use std::fmt;
use std::fs::File;
use std::io::{self, BufRead, BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const QSEB_MAGIC: [u8; 4] = *b"QSEB";
pub const QSEB_VERSION: u16 = 1;
const QSEB_HEADER_LEN: usize = 20;

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("bad magic bytes {0:02x?}, expected \"QSEB\"")]
    BadMagic([u8; 4]),
    #[error("unsupported QSEB version {0}")]
    UnsupportedVersion(u16),
    #[error("malformed header: {0}")]
    Header(String),
    #[error("payload truncated: expected {expected} bytes of embeddings, found {found}")]
    Truncated { expected: u64, found: u64 },
    #[error("record {record}: embedding has {got} components, expected {expected}")]
    DimensionMismatch {
        record: usize,
        expected: usize,
        got: usize,
    },
    #[error("record {record}: duplicate id {id:?}")]
    DuplicateId { record: usize, id: String },
    #[error("record {record}: component {component} is not finite")]
    NonFinite { record: usize, component: usize },
    #[error("record {record}: {message}")]
    Parse { record: usize, message: String },
    #[error("sidecar has {sidecar} records but the payload has {payload}")]
    CountMismatch { payload: u64, sidecar: u64 },
    #[error("record {id:?} has no mos")]
    MissingMos { id: String },
    #[error("record {id:?} has no is_reference flag")]
    MissingReferenceFlag { id: String },
    #[error("{0} subset is empty")]
    EmptySubset(AnchorLabel),
    #[error("need at least {needed} records, got {got}")]
    TooFewRecords { needed: usize, got: usize },
    #[error("fraction {0} is outside (0, 1]")]
    FractionOutOfRange(f64),
    #[error("dimension must be at least 1")]
    ZeroDimension,
}

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> StoreError + '_ {
    move |source| StoreError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// On-disk dataset format.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Format {
    Qseb,
    Csv,
}

impl Format {
    /// Guesses the format from a file extension, defaulting to QSEB.
    pub fn from_path(path: &Path) -> Format {
        match path.extension().and_then(|e| e.to_str()) {
            Some(ext) if ext.eq_ignore_ascii_case("csv") => Format::Csv,
            _ => Format::Qseb,
        }
    }
}

impl FromStr for Format {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "qseb" => Ok(Format::Qseb),
            "csv" => Ok(Format::Csv),
            other => Err(format!("unknown format {other:?}, expected qseb or csv")),
        }
    }
}

impl fmt::Display for Format {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Format::Qseb => "qseb",
            Format::Csv => "csv",
        })
    }
}

/// One image's embedding plus its metadata.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingRecord {
    pub id: String,
    pub embedding: Vec<f32>,
    pub mos: Option<f64>,
    pub is_reference: Option<bool>,
}

impl EmbeddingRecord {
    pub fn new(id: impl Into<String>, embedding: Vec<f32>) -> Self {
        Self {
            id: id.into(),
            embedding,
            mos: None,
            is_reference: None,
        }
    }

    pub fn with_mos(mut self, mos: f64) -> Self {
        self.mos = Some(mos);
        self
    }

    pub fn with_reference(mut self, is_reference: bool) -> Self {
        self.is_reference = Some(is_reference);
        self
    }

    fn require_mos(&self) -> Result<f64, StoreError> {
        self.mos.ok_or_else(|| StoreError::MissingMos {
            id: self.id.clone(),
        })
    }
}

/// A uniform-dimension collection of embedding records.
///
/// Records can only be added through [`EmbeddingDataset::push`], which keeps
/// ids unique and every embedding finite and of length `dim`.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingDataset {
    dim: usize,
    records: Vec<EmbeddingRecord>,
    ids: HashSet<String>,
    pub source_tag: String,
}

impl EmbeddingDataset {
    pub fn new(dim: usize, source_tag: impl Into<String>) -> Result<Self, StoreError> {
        if dim == 0 {
            return Err(StoreError::ZeroDimension);
        }
        Ok(Self {
            dim,
            records: Vec::new(),
            ids: HashSet::new(),
            source_tag: source_tag.into(),
        })
    }

    pub fn from_records(
        dim: usize,
        source_tag: impl Into<String>,
        records: impl IntoIterator<Item = EmbeddingRecord>,
    ) -> Result<Self, StoreError> {
        let mut dataset = Self::new(dim, source_tag)?;
        for record in records {
            dataset.push(record)?;
        }
        Ok(dataset)
    }

    /// Validates and appends a record.
    pub fn push(&mut self, record: EmbeddingRecord) -> Result<(), StoreError> {
        let index = self.records.len();
        validate_embedding(index, self.dim, &record.embedding)?;
        if let Some(mos) = record.mos {
            if !mos.is_finite() {
                return Err(StoreError::Parse {
                    record: index,
                    message: format!("mos {mos} is not finite"),
                });
            }
        }
        if !self.ids.insert(record.id.clone()) {
            return Err(StoreError::DuplicateId {
                record: index,
                id: record.id,
            });
        }
        self.records.push(record);
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn records(&self) -> &[EmbeddingRecord] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn into_records(self) -> Vec<EmbeddingRecord> {
        self.records
    }
}

fn validate_embedding(record: usize, dim: usize, embedding: &[f32]) -> Result<(), StoreError> {
    if embedding.len() != dim {
        return Err(StoreError::DimensionMismatch {
            record,
            expected: dim,
            got: embedding.len(),
        });
    }
    if let Some(component) = embedding.iter().position(|v| !v.is_finite()) {
        return Err(StoreError::NonFinite { record, component });
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum AnchorLabel {
    High,
    Low,
}

impl fmt::Display for AnchorLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            AnchorLabel::High => "high",
            AnchorLabel::Low => "low",
        })
    }
}

/// A labeled pool of records that is aggregated into one centroid.
#[derive(Debug, Clone, PartialEq)]
pub struct AnchorSubset {
    pub label: AnchorLabel,
    pub dim: usize,
    pub records: Vec<EmbeddingRecord>,
}

impl AnchorSubset {
    pub fn new(label: AnchorLabel, dim: usize, records: Vec<EmbeddingRecord>) -> Self {
        Self {
            label,
            dim,
            records,
        }
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }
}

/// Total order on (mos, id). Callers must have checked that mos is present.
pub(crate) fn cmp_mos_id(a: &EmbeddingRecord, b: &EmbeddingRecord) -> Ordering {
    let (ma, mb) = (a.mos.unwrap_or(f64::NAN), b.mos.unwrap_or(f64::NAN));
    ma.total_cmp(&mb).then_with(|| a.id.cmp(&b.id))
}

pub(crate) fn require_all_mos(records: &[EmbeddingRecord]) -> Result<(), StoreError> {
    records.iter().try_for_each(|r| r.require_mos().map(|_| ()))
}

/// Splits a MOS-labeled pool into two halves at the median.
///
/// Records are sorted by `(mos, id)`; the first `floor(n/2)` go to Low and
/// the rest to High, so High is never smaller than Low. Both subsets are
/// returned in sorted order.
pub fn split_by_median(
    dataset: &EmbeddingDataset,
) -> Result<(AnchorSubset, AnchorSubset), StoreError> {
    require_all_mos(dataset.records())?;
    if dataset.len() < 2 {
        return Err(StoreError::TooFewRecords {
            needed: 2,
            got: dataset.len(),
        });
    }
    let mut sorted = dataset.records().to_vec();
    sorted.sort_by(cmp_mos_id);
    let high = sorted.split_off(sorted.len() / 2);
    Ok((
        AnchorSubset::new(AnchorLabel::High, dataset.dim(), high),
        AnchorSubset::new(AnchorLabel::Low, dataset.dim(), sorted),
    ))
}

/// Splits a full-reference pool into reference (High) and distorted (Low)
/// records, preserving the original order inside each subset.
pub fn split_by_reference_flag(
    dataset: &EmbeddingDataset,
) -> Result<(AnchorSubset, AnchorSubset), StoreError> {
    let mut high = Vec::new();
    let mut low = Vec::new();
    for record in dataset.records() {
        match record.is_reference {
            Some(true) => high.push(record.clone()),
            Some(false) => low.push(record.clone()),
            None => {
                return Err(StoreError::MissingReferenceFlag {
                    id: record.id.clone(),
                })
            }
        }
    }
    if high.is_empty() {
        return Err(StoreError::EmptySubset(AnchorLabel::High));
    }
    if low.is_empty() {
        return Err(StoreError::EmptySubset(AnchorLabel::Low));
    }
    Ok((
        AnchorSubset::new(AnchorLabel::High, dataset.dim(), high),
        AnchorSubset::new(AnchorLabel::Low, dataset.dim(), low),
    ))
}

/// How an anchor pool is divided into High and Low subsets.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SplitMethod {
    #[default]
    Median,
    ReferenceFlag,
}

impl SplitMethod {
    pub fn split(
        self,
        dataset: &EmbeddingDataset,
    ) -> Result<(AnchorSubset, AnchorSubset), StoreError> {
        match self {
            SplitMethod::Median => split_by_median(dataset),
            SplitMethod::ReferenceFlag => split_by_reference_flag(dataset),
        }
    }
}

impl FromStr for SplitMethod {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "median" => Ok(SplitMethod::Median),
            "reference-flag" => Ok(SplitMethod::ReferenceFlag),
            other => Err(format!(
                "unknown split {other:?}, expected median or reference-flag"
            )),
        }
    }
}

/// Number of records kept when subsampling `n` records at `fraction`:
/// round half up, never below one.
pub fn subsample_size(n: usize, fraction: f64) -> usize {
    let m = (fraction * n as f64 + 0.5).floor() as usize;
    m.clamp(1, n.max(1))
}

/// Draws `max(1, round(fraction * n))` records uniformly without replacement.
///
/// Selected records keep their relative order from `subset`, so a fraction of
/// 1.0 returns the subset unchanged.
pub fn subsample(
    subset: &AnchorSubset,
    fraction: f64,
    seed: u64,
) -> Result<AnchorSubset, StoreError> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(StoreError::FractionOutOfRange(fraction));
    }
    if subset.is_empty() {
        return Err(StoreError::EmptySubset(subset.label));
    }
    let n = subset.len();
    let m = subsample_size(n, fraction);
    if m == n {
        return Ok(subset.clone());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut picked = rand::seq::index::sample(&mut rng, n, m).into_vec();
    picked.sort_unstable();
    let records = picked
        .into_iter()
        .map(|i| subset.records[i].clone())
        .collect();
    Ok(AnchorSubset::new(subset.label, subset.dim, records))
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SidecarEntry {
    id: String,
    mos: Option<f64>,
    is_reference: Option<bool>,
}

/// Path of the metadata sidecar that accompanies a QSEB payload.
pub fn sidecar_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".meta.jsonl");
    PathBuf::from(s)
}

pub fn load_dataset(path: &Path, format: Format) -> Result<EmbeddingDataset, StoreError> {
    let tag = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    match format {
        Format::Qseb => load_qseb(path, tag),
        Format::Csv => load_csv(path, tag),
    }
}

pub fn save_dataset(
    dataset: &EmbeddingDataset,
    path: &Path,
    format: Format,
) -> Result<(), StoreError> {
    match format {
        Format::Qseb => save_qseb(dataset, path),
        Format::Csv => save_csv(dataset, path),
    }
}

fn load_qseb(path: &Path, tag: String) -> Result<EmbeddingDataset, StoreError> {
    let file = File::open(path).map_err(io_err(path))?;
    let payload_len = file.metadata().map_err(io_err(path))?.len();
    let mut reader = BufReader::new(file);

    let mut header = [0u8; QSEB_HEADER_LEN];
    reader.read_exact(&mut header).map_err(|e| {
        if e.kind() == io::ErrorKind::UnexpectedEof {
            StoreError::Header(format!(
                "file is shorter than the {QSEB_HEADER_LEN}-byte header"
            ))
        } else {
            io_err(path)(e)
        }
    })?;
    let magic: [u8; 4] = header[0..4].try_into().unwrap();
    if magic != QSEB_MAGIC {
        return Err(StoreError::BadMagic(magic));
    }
    let version = u16::from_le_bytes(header[4..6].try_into().unwrap());
    if version != QSEB_VERSION {
        return Err(StoreError::UnsupportedVersion(version));
    }
    let reserved = u16::from_le_bytes(header[6..8].try_into().unwrap());
    if reserved != 0 {
        return Err(StoreError::Header(format!(
            "reserved field is {reserved}, expected 0"
        )));
    }
    let dim = u32::from_le_bytes(header[8..12].try_into().unwrap()) as usize;
    let count = u64::from_le_bytes(header[12..20].try_into().unwrap());
    if dim == 0 {
        return Err(StoreError::ZeroDimension);
    }
    let expected = count
        .checked_mul(dim as u64 * 4)
        .ok_or_else(|| StoreError::Header(format!("count {count} x dim {dim} overflows")))?;
    let found = payload_len - QSEB_HEADER_LEN as u64;
    if found != expected {
        return Err(StoreError::Truncated { expected, found });
    }

    let sidecar = sidecar_path(path);
    let meta_reader = BufReader::new(File::open(&sidecar).map_err(io_err(&sidecar))?);
    let mut meta_lines = meta_reader.lines().filter(|l| match l {
        Ok(line) => !line.trim().is_empty(),
        Err(_) => true,
    });

    let mut dataset = EmbeddingDataset::new(dim, tag)?;
    let mut buf = vec![0u8; dim * 4];
    for index in 0..count as usize {
        reader.read_exact(&mut buf).map_err(io_err(path))?;
        let embedding: Vec<f32> = buf
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
            .collect();
        let line = match meta_lines.next() {
            Some(line) => line.map_err(io_err(&sidecar))?,
            None => {
                return Err(StoreError::CountMismatch {
                    payload: count,
                    sidecar: index as u64,
                })
            }
        };
        let entry: SidecarEntry = serde_json::from_str(&line).map_err(|e| StoreError::Parse {
            record: index,
            message: format!("sidecar: {e}"),
        })?;
        dataset.push(EmbeddingRecord {
            id: entry.id,
            embedding,
            mos: entry.mos,
            is_reference: entry.is_reference,
        })?;
    }
    let extra = meta_lines.count() as u64;
    if extra > 0 {
        return Err(StoreError::CountMismatch {
            payload: count,
            sidecar: count + extra,
        });
    }
    Ok(dataset)
}

fn save_qseb(dataset: &EmbeddingDataset, path: &Path) -> Result<(), StoreError> {
    let dim = u32::try_from(dataset.dim())
        .map_err(|_| StoreError::Header(format!("dim {} does not fit in u32", dataset.dim())))?;
    let mut out = BufWriter::new(File::create(path).map_err(io_err(path))?);
    let mut header = Vec::with_capacity(QSEB_HEADER_LEN);
    header.extend_from_slice(&QSEB_MAGIC);
    header.extend_from_slice(&QSEB_VERSION.to_le_bytes());
    header.extend_from_slice(&0u16.to_le_bytes());
    header.extend_from_slice(&dim.to_le_bytes());
    header.extend_from_slice(&(dataset.len() as u64).to_le_bytes());
    out.write_all(&header).map_err(io_err(path))?;
    for record in dataset.records() {
        for v in &record.embedding {
            out.write_all(&v.to_le_bytes()).map_err(io_err(path))?;
        }
    }
    out.flush().map_err(io_err(path))?;

    let sidecar = sidecar_path(path);
    let mut meta = BufWriter::new(File::create(&sidecar).map_err(io_err(&sidecar))?);
    for record in dataset.records() {
        let entry = SidecarEntry {
            id: record.id.clone(),
            mos: record.mos,
            is_reference: record.is_reference,
        };
        let line = serde_json::to_string(&entry).expect("sidecar entry serializes");
        writeln!(meta, "{line}").map_err(io_err(&sidecar))?;
    }
    meta.flush().map_err(io_err(&sidecar))
}

const CSV_META_COLUMNS: [&str; 3] = ["id", "mos", "is_reference"];

fn csv_err(path: &Path, e: csv::Error) -> StoreError {
    match e.into_kind() {
        csv::ErrorKind::Io(source) => StoreError::Io {
            path: path.to_path_buf(),
            source,
        },
        other => StoreError::Header(format!("{other:?}")),
    }
}

fn load_csv(path: &Path, tag: String) -> Result<EmbeddingDataset, StoreError> {
    let file = File::open(path).map_err(io_err(path))?;
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .from_reader(file);
    let headers = reader.headers().map_err(|e| csv_err(path, e))?.clone();
    if headers.len() < 4 || headers.iter().take(3).ne(CSV_META_COLUMNS) {
        return Err(StoreError::Header(format!(
            "expected header id,mos,is_reference,e0,..., got {:?}",
            headers.iter().collect::<Vec<_>>()
        )));
    }
    for (i, name) in headers.iter().skip(3).enumerate() {
        if name != format!("e{i}") {
            return Err(StoreError::Header(format!(
                "column {} is {name:?}, expected \"e{i}\"",
                i + 3
            )));
        }
    }
    let dim = headers.len() - 3;
    let mut dataset = EmbeddingDataset::new(dim, tag)?;
    for (index, row) in reader.records().enumerate() {
        let row = row.map_err(|e| StoreError::Parse {
            record: index,
            message: format!("line {}: {e}", index + 2),
        })?;
        let parse_err = |message: String| StoreError::Parse {
            record: index,
            message: format!("line {}: {message}", index + 2),
        };
        if row.len() != headers.len() {
            return Err(StoreError::DimensionMismatch {
                record: index,
                expected: dim,
                got: row.len().saturating_sub(3),
            });
        }
        let mos = match row[1].trim() {
            "" => None,
            s => Some(
                s.parse::<f64>()
                    .map_err(|e| parse_err(format!("mos {s:?}: {e}")))?,
            ),
        };
        let is_reference = match row[2].trim() {
            "" => None,
            "true" | "1" => Some(true),
            "false" | "0" => Some(false),
            s => return Err(parse_err(format!("is_reference {s:?} is not a boolean"))),
        };
        let embedding = row
            .iter()
            .skip(3)
            .enumerate()
            .map(|(c, s)| {
                s.trim()
                    .parse::<f32>()
                    .map_err(|e| parse_err(format!("e{c} {s:?}: {e}")))
            })
            .collect::<Result<Vec<_>, _>>()?;
        dataset.push(EmbeddingRecord {
            id: row[0].to_string(),
            embedding,
            mos,
            is_reference,
        })?;
    }
    Ok(dataset)
}

fn save_csv(dataset: &EmbeddingDataset, path: &Path) -> Result<(), StoreError> {
    let file = File::create(path).map_err(io_err(path))?;
    let mut writer = csv::Writer::from_writer(BufWriter::new(file));
    let header = CSV_META_COLUMNS
        .iter()
        .map(|s| s.to_string())
        .chain((0..dataset.dim()).map(|i| format!("e{i}")));
    writer.write_record(header).map_err(|e| csv_err(path, e))?;
    // Display for floats prints the shortest string that parses back to the same value.
    for record in dataset.records() {
        let meta = [
            record.id.clone(),
            record.mos.map(|m| m.to_string()).unwrap_or_default(),
            record
                .is_reference
                .map(|b| b.to_string())
                .unwrap_or_default(),
        ];
        let fields = meta
            .into_iter()
            .chain(record.embedding.iter().map(|v| v.to_string()));
        writer.write_record(fields).map_err(|e| csv_err(path, e))?;
    }
    writer.flush().map_err(io_err(path))
}
