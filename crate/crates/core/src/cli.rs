//! Command-line front end.
//!
//! Every command validates its flags before touching data files. Failures are
//! reported on stderr as one JSON object per line and give a nonzero exit
//! code; so do per-record errors and sweep error rows, after the output file
//! has been written.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{ArgAction, Args, Parser, Subcommand, ValueEnum};

use crate::aggregation::{build_centroid_pair, load_centroids, save_centroids, AggregationSpec};
use crate::evaluation::{csv_field, evaluate, Measure};
use crate::harness::{emit_results, run_sweep, ResultFormat, SweepConfig};
use crate::kmeans::{KMeansConfig, DEFAULT_MAX_ITER, DEFAULT_TOL};
use crate::scoring::score_batch;
use crate::store::{load_dataset, save_dataset, Format, SplitMethod};

#[derive(Debug, Parser)]
#[command(
    name = "anchor-quality",
    version,
    about = "Anchor-centroid quality scoring over image embeddings"
)]
pub struct Cli {
    /// Worker threads; results do not depend on this.
    #[arg(long, global = true, value_parser = clap::value_parser!(u16).range(1..))]
    pub threads: Option<u16>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Split an anchor pool and aggregate it into a centroid file.
    BuildAnchors(BuildAnchorsArgs),
    /// Score embeddings against a centroid file.
    Score(ScoreArgs),
    /// Correlate scores with the MOS of an evaluation set.
    Evaluate(EvaluateArgs),
    /// Run an ablation sweep described by a JSON or TOML config.
    Sweep(SweepArgs),
    /// Convert an embedding file between QSEB and CSV.
    Convert(ConvertArgs),
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::BuildAnchors(_) => "build-anchors",
            Command::Score(_) => "score",
            Command::Evaluate(_) => "evaluate",
            Command::Sweep(_) => "sweep",
            Command::Convert(_) => "convert",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SplitArg {
    Median,
    ReferenceFlag,
}

impl From<SplitArg> for SplitMethod {
    fn from(s: SplitArg) -> Self {
        match s {
            SplitArg::Median => SplitMethod::Median,
            SplitArg::ReferenceFlag => SplitMethod::ReferenceFlag,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum MethodArg {
    Mean,
    Offset,
    Kmeans,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum FormatArg {
    Qseb,
    Csv,
}

impl From<FormatArg> for Format {
    fn from(f: FormatArg) -> Self {
        match f {
            FormatArg::Qseb => Format::Qseb,
            FormatArg::Csv => Format::Csv,
        }
    }
}

fn format_or_guess(explicit: Option<FormatArg>, path: &Path) -> Format {
    explicit
        .map(Format::from)
        .unwrap_or_else(|| Format::from_path(path))
}

#[derive(Debug, Args)]
pub struct BuildAnchorsArgs {
    #[arg(long)]
    pub anchors: PathBuf,
    /// Input format; guessed from the extension when omitted.
    #[arg(long, value_enum)]
    pub format: Option<FormatArg>,
    #[arg(long, value_enum)]
    pub split: SplitArg,
    #[arg(long, value_enum, default_value = "mean")]
    pub method: MethodArg,
    /// Offset fraction for --method offset, in [0, 0.5).
    #[arg(long)]
    pub offset: Option<f64>,
    /// Cluster count for --method kmeans.
    #[arg(long)]
    pub clusters: Option<usize>,
    /// Seed for --method kmeans; required, never defaulted.
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, default_value_t = DEFAULT_MAX_ITER)]
    pub max_iter: usize,
    #[arg(long, default_value_t = DEFAULT_TOL)]
    pub tol: f64,
    #[arg(long, action = ArgAction::Set, default_value_t = true)]
    pub normalize: bool,
    #[arg(long)]
    pub out: PathBuf,
}

impl BuildAnchorsArgs {
    fn spec(&self) -> Result<AggregationSpec> {
        let spec = match self.method {
            MethodArg::Mean => AggregationSpec::mean(),
            MethodArg::Offset => {
                let offset = self.offset.context("--method offset requires --offset")?;
                AggregationSpec::offset(offset)
            }
            MethodArg::Kmeans => {
                let clusters = self
                    .clusters
                    .context("--method kmeans requires --clusters")?;
                let seed = self.seed.context("--method kmeans requires --seed")?;
                AggregationSpec::kmeans(KMeansConfig {
                    n_clusters: clusters,
                    seed,
                    max_iter: self.max_iter,
                    tol: self.tol,
                })
            }
        }
        .with_normalize(self.normalize);
        if self.offset.is_some() && self.method != MethodArg::Offset {
            bail!("--offset only applies to --method offset");
        }
        if self.clusters.is_some() && self.method != MethodArg::Kmeans {
            bail!("--clusters only applies to --method kmeans");
        }
        if self.max_iter == 0 || self.tol.is_nan() || self.tol <= 0.0 {
            bail!("--max-iter must be positive and --tol must be a positive number");
        }
        spec.validate()?;
        Ok(spec)
    }
}

#[derive(Debug, Args)]
pub struct ScoreArgs {
    #[arg(long)]
    pub centroids: PathBuf,
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long, value_enum)]
    pub format: Option<FormatArg>,
    /// Output CSV with columns id,s_high,s_low,score.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    #[arg(long)]
    pub centroids: PathBuf,
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long, value_enum)]
    pub format: Option<FormatArg>,
    /// Comma-separated subset of srcc,krcc,plcc. SRCC is always reported.
    #[arg(long, value_delimiter = ',', default_value = "srcc")]
    pub measures: Vec<Measure>,
    /// Also write the JSON report here.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Write per-image id,score,mos rows here.
    #[arg(long)]
    pub csv: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Result format; guessed from the extension of --out when omitted.
    #[arg(long, value_enum)]
    pub format: Option<ResultFormatArg>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ResultFormatArg {
    Csv,
    Json,
}

#[derive(Debug, Args)]
pub struct ConvertArgs {
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long, value_enum)]
    pub in_format: Option<FormatArg>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, value_enum)]
    pub out_format: Option<FormatArg>,
}

/// Outcome of a command that ran to completion.
#[derive(Debug, Default)]
pub struct Outcome {
    /// Non-fatal problems; any of them makes the exit code nonzero.
    pub diagnostics: Vec<String>,
}

fn file_name(path: &Path) -> String {
    path.file_name()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default()
}

fn build_anchors(args: &BuildAnchorsArgs) -> Result<Outcome> {
    let spec = args.spec()?;
    let split = SplitMethod::from(args.split);
    let dataset = load_dataset(&args.anchors, format_or_guess(args.format, &args.anchors))
        .with_context(|| format!("loading {}", args.anchors.display()))?;
    let (high, low) = split.split(&dataset)?;
    println!("high: {} records", high.len());
    println!("low: {} records", low.len());
    println!("spec: {spec}");
    let mut pair = build_centroid_pair(&spec, &high, &low)?;
    pair.provenance = format!(
        "{} split of {}; high={} low={}",
        match split {
            SplitMethod::Median => "median",
            SplitMethod::ReferenceFlag => "reference-flag",
        },
        file_name(&args.anchors),
        high.len(),
        low.len()
    );
    save_centroids(&pair, &args.out)?;
    Ok(Outcome::default())
}

fn score(args: &ScoreArgs) -> Result<Outcome> {
    let pair = load_centroids(&args.centroids)
        .with_context(|| format!("loading {}", args.centroids.display()))?;
    let dataset = load_dataset(&args.input, format_or_guess(args.format, &args.input))
        .with_context(|| format!("loading {}", args.input.display()))?;
    let batch = score_batch(&dataset, &pair)?;
    let mut text = String::from("id,s_high,s_low,score\n");
    for (id, c) in &batch.scores {
        writeln!(
            text,
            "{},{},{},{}",
            csv_field(id),
            c.s_high,
            c.s_low,
            c.score
        )
        .unwrap();
    }
    fs::write(&args.out, text).with_context(|| format!("writing {}", args.out.display()))?;
    Ok(Outcome {
        diagnostics: batch
            .errors
            .iter()
            .map(|e| format!("record {} ({:?}): {}", e.index, e.id, e.error))
            .collect(),
    })
}

fn evaluate_cmd(args: &EvaluateArgs) -> Result<Outcome> {
    let pair = load_centroids(&args.centroids)
        .with_context(|| format!("loading {}", args.centroids.display()))?;
    let dataset = load_dataset(&args.input, format_or_guess(args.format, &args.input))
        .with_context(|| format!("loading {}", args.input.display()))?;
    let report = evaluate(&dataset, &pair, &args.measures)?;
    let json = report.to_json();
    println!("{json}");
    if let Some(out) = &args.out {
        fs::write(out, format!("{json}\n"))
            .with_context(|| format!("writing {}", out.display()))?;
    }
    if let Some(csv) = &args.csv {
        report
            .write_csv(csv)
            .with_context(|| format!("writing {}", csv.display()))?;
    }
    Ok(Outcome {
        diagnostics: report
            .skipped
            .iter()
            .map(|id| format!("record {id:?} could not be scored"))
            .collect(),
    })
}

fn sweep(args: &SweepArgs) -> Result<Outcome> {
    let config = SweepConfig::load(&args.config)
        .with_context(|| format!("reading {}", args.config.display()))?;
    let format = match args.format {
        Some(ResultFormatArg::Csv) => ResultFormat::Csv,
        Some(ResultFormatArg::Json) => ResultFormat::Json,
        None => ResultFormat::from_path(&args.out),
    };
    let inputs = config.load_inputs()?;
    let report = run_sweep(&config, &inputs)?;
    emit_results(&report, &args.out, format)?;
    let diagnostics = report
        .results
        .iter()
        .flat_map(|r| {
            r.per_eval_set.iter().filter_map(move |s| {
                s.error
                    .as_ref()
                    .map(|e| format!("{} = {}, {}: {e}", report.axis, r.axis_value, s.name))
            })
        })
        .collect();
    Ok(Outcome { diagnostics })
}

fn convert(args: &ConvertArgs) -> Result<Outcome> {
    let dataset = load_dataset(&args.input, format_or_guess(args.in_format, &args.input))
        .with_context(|| format!("loading {}", args.input.display()))?;
    save_dataset(
        &dataset,
        &args.out,
        format_or_guess(args.out_format, &args.out),
    )
    .with_context(|| format!("writing {}", args.out.display()))?;
    Ok(Outcome::default())
}

pub fn run(command: &Command) -> Result<Outcome> {
    match command {
        Command::BuildAnchors(a) => build_anchors(a),
        Command::Score(a) => score(a),
        Command::Evaluate(a) => evaluate_cmd(a),
        Command::Sweep(a) => sweep(a),
        Command::Convert(a) => convert(a),
    }
}

fn report_error(command: &str, message: &str) {
    let line = serde_json::json!({ "command": command, "error": message });
    eprintln!("{line}");
}

/// Parses arguments, runs the command, and returns the process exit code.
pub fn main() -> i32 {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    let name = cli.command.name();
    let mut pool = rayon::ThreadPoolBuilder::new();
    if let Some(n) = cli.threads {
        pool = pool.num_threads(n as usize);
    }
    let pool = match pool.build() {
        Ok(p) => p,
        Err(e) => {
            report_error(name, &e.to_string());
            return 1;
        }
    };
    match pool.install(|| run(&cli.command)) {
        Ok(outcome) if outcome.diagnostics.is_empty() => 0,
        Ok(outcome) => {
            for d in &outcome.diagnostics {
                report_error(name, d);
            }
            1
        }
        Err(e) => {
            report_error(name, &format!("{e:#}"));
            1
        }
    }
}
