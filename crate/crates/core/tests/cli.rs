use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use anchor_quality::synthetic::LatentModel;
use anchor_quality::{
    load_centroids, load_dataset, save_dataset, EmbeddingDataset, EmbeddingRecord, Format,
};
use tempfile::TempDir;

fn bin(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_anchor-quality"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> Output {
    let out = bin(args);
    assert!(
        out.status.success(),
        "{args:?} failed:\n{}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

/// Runs a command that must fail and returns its stderr.
fn fails(args: &[&str]) -> String {
    let out = bin(args);
    assert!(!out.status.success(), "{args:?} unexpectedly succeeded");
    String::from_utf8_lossy(&out.stderr).into_owned()
}

struct Workspace {
    dir: TempDir,
}

impl Workspace {
    fn new() -> Self {
        Self {
            dir: tempfile::tempdir().unwrap(),
        }
    }

    fn path(&self, name: &str) -> PathBuf {
        self.dir.path().join(name)
    }

    fn p(&self, name: &str) -> String {
        self.path(name).to_string_lossy().into_owned()
    }

    fn write(&self, name: &str, text: &str) -> String {
        fs::write(self.path(name), text).unwrap();
        self.p(name)
    }
}

const TOY: &str = "\
id,mos,is_reference,e0,e1
a,1.0,,1.0,0.0
b,2.0,,0.8,0.2
c,3.0,,0.2,0.8
d,4.0,,0.0,1.0
";

fn toy_centroids(ws: &Workspace) -> String {
    let anchors = ws.write("toy.csv", TOY);
    ok(&[
        "build-anchors",
        "--anchors",
        &anchors,
        "--split",
        "median",
        "--out",
        &ws.p("c.json"),
    ]);
    ws.p("c.json")
}

#[test]
fn build_anchors_writes_two_centroids() {
    let ws = Workspace::new();
    let anchors = ws.write("toy.csv", TOY);
    let out = ok(&[
        "build-anchors",
        "--anchors",
        &anchors,
        "--split",
        "median",
        "--out",
        &ws.p("c.json"),
    ]);
    let stdout = String::from_utf8(out.stdout).unwrap();
    assert!(stdout.contains("high: 2 records"));
    assert!(stdout.contains("low: 2 records"));
    assert!(stdout.contains("mean(normalize=true)"));

    let json: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(ws.path("c.json")).unwrap()).unwrap();
    assert_eq!(json["dim"], 2);
    assert_eq!(json["c_high"].as_array().unwrap().len(), 2);
    assert_eq!(json["c_low"].as_array().unwrap().len(), 2);
    // High holds c and d, whose unit vectors lean towards e1.
    let pair = load_centroids(&ws.path("c.json")).unwrap();
    assert!(pair.c_high()[1] > pair.c_high()[0]);
    assert!(pair.c_low()[0] > pair.c_low()[1]);
}

#[test]
fn reference_flag_split_with_hundred_clusters() {
    let ws = Workspace::new();
    let model = LatentModel::new(16, 0.5, 1);
    let records = model
        .sample(400, "img", 2)
        .into_records()
        .into_iter()
        .map(|r| {
            let good = r.mos.unwrap() > 0.0;
            r.with_reference(good)
        });
    let pool = EmbeddingDataset::from_records(16, "pool", records).unwrap();
    save_dataset(&pool, &ws.path("pool.qseb"), Format::Qseb).unwrap();
    ok(&[
        "build-anchors",
        "--anchors",
        &ws.p("pool.qseb"),
        "--split",
        "reference-flag",
        "--method",
        "kmeans",
        "--clusters",
        "100",
        "--seed",
        "7",
        "--out",
        &ws.p("c.json"),
    ]);
    let pair = load_centroids(&ws.path("c.json")).unwrap();
    assert_eq!(pair.dim(), 16);
    assert!(pair
        .provenance
        .starts_with("reference-flag split of pool.qseb"));
}

#[test]
fn build_anchors_names_record_without_mos() {
    let ws = Workspace::new();
    let anchors = ws.write(
        "m.csv",
        "id,mos,is_reference,e0\na,1.0,,1.0\nb,,,2.0\nc,,,3.0\n",
    );
    let err = fails(&[
        "build-anchors",
        "--anchors",
        &anchors,
        "--split",
        "median",
        "--out",
        &ws.p("c.json"),
    ]);
    let line: serde_json::Value = serde_json::from_str(err.trim()).unwrap();
    assert_eq!(line["error"], "record \"b\" has no mos");
    assert!(!ws.path("c.json").exists());
}

#[test]
fn kmeans_without_seed_is_rejected_before_loading() {
    let ws = Workspace::new();
    let err = fails(&[
        "build-anchors",
        "--anchors",
        &ws.p("missing.csv"),
        "--split",
        "median",
        "--method",
        "kmeans",
        "--clusters",
        "3",
        "--out",
        &ws.p("c.json"),
    ]);
    assert!(err.contains("--seed"), "{err}");
    assert!(!err.contains("missing.csv"), "{err}");
}

#[test]
fn score_writes_one_row_per_record() {
    let ws = Workspace::new();
    let centroids = toy_centroids(&ws);
    let input = ws.write(
        "in.csv",
        "id,mos,is_reference,e0,e1\nx,,,1.0,0.0\ny,,,0.0,1.0\nz,,,1.0,1.0\n",
    );
    ok(&[
        "score",
        "--centroids",
        &centroids,
        "--input",
        &input,
        "--out",
        &ws.p("s.csv"),
    ]);
    let text = fs::read_to_string(ws.path("s.csv")).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], "id,s_high,s_low,score");
    assert_eq!(lines.len(), 4);
    let score = |line: &str| line.rsplit(',').next().unwrap().parse::<f64>().unwrap();
    assert!(score(lines[2]) > 0.5 && score(lines[1]) < 0.5);
}

#[test]
fn swapped_centroids_give_complementary_scores() {
    let ws = Workspace::new();
    let centroids = toy_centroids(&ws);
    let mut json: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(&centroids).unwrap()).unwrap();
    let high = json["c_high"].take();
    json["c_high"] = json["c_low"].take();
    json["c_low"] = high;
    let swapped = ws.write("swapped.json", &json.to_string());

    let input = ws.write(
        "in.csv",
        "id,mos,is_reference,e0,e1\nx,,,0.3,0.9\ny,,,0.7,-0.1\n",
    );
    ok(&[
        "score",
        "--centroids",
        &centroids,
        "--input",
        &input,
        "--out",
        &ws.p("a.csv"),
    ]);
    ok(&[
        "score",
        "--centroids",
        &swapped,
        "--input",
        &input,
        "--out",
        &ws.p("b.csv"),
    ]);
    let scores = |name: &str| -> Vec<f64> {
        fs::read_to_string(ws.path(name))
            .unwrap()
            .lines()
            .skip(1)
            .map(|l| l.rsplit(',').next().unwrap().parse().unwrap())
            .collect()
    };
    for (a, b) in scores("a.csv").iter().zip(scores("b.csv")) {
        assert!((a + b - 1.0).abs() < 1e-12);
    }
}

#[test]
fn score_on_empty_input_writes_header_only() {
    let ws = Workspace::new();
    let centroids = toy_centroids(&ws);
    let input = ws.write("empty.csv", "id,mos,is_reference,e0,e1\n");
    ok(&[
        "score",
        "--centroids",
        &centroids,
        "--input",
        &input,
        "--out",
        &ws.p("s.csv"),
    ]);
    assert_eq!(
        fs::read_to_string(ws.path("s.csv")).unwrap(),
        "id,s_high,s_low,score\n"
    );
}

#[test]
fn score_rejects_dimension_mismatch() {
    let ws = Workspace::new();
    let centroids = toy_centroids(&ws);
    let input = ws.write("in.csv", "id,mos,is_reference,e0,e1,e2\nx,,,1.0,0.0,0.0\n");
    let err = fails(&[
        "score",
        "--centroids",
        &centroids,
        "--input",
        &input,
        "--out",
        &ws.p("s.csv"),
    ]);
    let line: serde_json::Value = serde_json::from_str(err.lines().next().unwrap()).unwrap();
    assert_eq!(line["command"], "score");
    assert!(
        line["error"].as_str().unwrap().contains("dimension"),
        "{err}"
    );
}

#[test]
fn score_flags_zero_vectors_but_writes_the_rest() {
    let ws = Workspace::new();
    let centroids = toy_centroids(&ws);
    let input = ws.write(
        "in.csv",
        "id,mos,is_reference,e0,e1\nx,,,1.0,0.0\nzero,,,0.0,0.0\n",
    );
    let err = fails(&[
        "score",
        "--centroids",
        &centroids,
        "--input",
        &input,
        "--out",
        &ws.p("s.csv"),
    ]);
    assert!(err.contains("zero"), "{err}");
    assert_eq!(
        fs::read_to_string(ws.path("s.csv"))
            .unwrap()
            .lines()
            .count(),
        2
    );
}

#[test]
fn evaluate_identity_ordering_is_perfect() {
    let ws = Workspace::new();
    let centroids = ws.write(
        "c.json",
        r#"{"dim": 2, "c_high": [0.0, 1.0], "c_low": [1.0, 0.0], "spec": "text prompts", "provenance": ""}"#,
    );
    let mut csv = String::from("id,mos,is_reference,e0,e1\n");
    for i in 0..10 {
        let t = i as f64 / 9.0 * std::f64::consts::FRAC_PI_2;
        csv.push_str(&format!(
            "img{i},{},,{},{}\n",
            i as f64 * 0.5,
            t.cos(),
            t.sin()
        ));
    }
    let eval = ws.write("eval.csv", &csv);
    let out = ok(&[
        "evaluate",
        "--centroids",
        &centroids,
        "--input",
        &eval,
        "--measures",
        "srcc,krcc",
        "--out",
        &ws.p("r.json"),
        "--csv",
        &ws.p("r.csv"),
    ]);
    let report: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(report["srcc"], 1.0);
    assert_eq!(report["krcc"], 1.0);
    assert!(report["plcc"].is_null());
    let file: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(ws.path("r.json")).unwrap()).unwrap();
    assert_eq!(file, report);
    assert_eq!(
        fs::read_to_string(ws.path("r.csv"))
            .unwrap()
            .lines()
            .count(),
        11
    );
}

#[test]
fn evaluate_on_latent_benchmark() {
    let ws = Workspace::new();
    let model = LatentModel::new(64, 0.5, 2024);
    save_dataset(
        &model.sample(2000, "anchor", 1),
        &ws.path("pool.qseb"),
        Format::Qseb,
    )
    .unwrap();
    save_dataset(
        &model.sample(1000, "eval", 2),
        &ws.path("eval.qseb"),
        Format::Qseb,
    )
    .unwrap();
    ok(&[
        "build-anchors",
        "--anchors",
        &ws.p("pool.qseb"),
        "--split",
        "median",
        "--out",
        &ws.p("c.json"),
    ]);
    let out = ok(&[
        "evaluate",
        "--centroids",
        &ws.p("c.json"),
        "--input",
        &ws.p("eval.qseb"),
    ]);
    let report: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert!(report["srcc"].as_f64().unwrap() > 0.9);
}

#[test]
fn evaluate_rejects_constant_mos() {
    let ws = Workspace::new();
    let centroids = toy_centroids(&ws);
    let eval = ws.write(
        "eval.csv",
        "id,mos,is_reference,e0,e1\nx,3,,1.0,0.0\ny,3,,0.0,1.0\nz,3,,1.0,1.0\n",
    );
    let err = fails(&["evaluate", "--centroids", &centroids, "--input", &eval]);
    assert!(err.contains("constant"), "{err}");
}

fn sweep_inputs(ws: &Workspace) {
    let model = LatentModel::new(16, 0.5, 3);
    save_dataset(
        &model.sample(200, "anchor", 4),
        &ws.path("anchors.csv"),
        Format::Csv,
    )
    .unwrap();
    save_dataset(
        &model.sample(100, "eval", 5),
        &ws.path("eval.csv"),
        Format::Csv,
    )
    .unwrap();
}

/// (axis_value, mean_srcc, std_srcc) for every row of a results CSV.
fn result_rows(path: &Path) -> Vec<(f64, f64, f64)> {
    let text = fs::read_to_string(path).unwrap();
    let mut lines = text.lines();
    assert_eq!(
        lines.next(),
        Some("axis,axis_value,eval_set,mean_srcc,std_srcc,repeats,error")
    );
    lines
        .map(|l| {
            let f: Vec<&str> = l.split(',').collect();
            (
                f[1].parse().unwrap(),
                f[3].parse().unwrap(),
                f[4].parse().unwrap(),
            )
        })
        .collect()
}

#[test]
fn sweep_reduction_chain_gives_identical_values() {
    let ws = Workspace::new();
    sweep_inputs(&ws);
    let base = r#""base_seed": 1, "anchor_source": "anchors.csv", "eval_sets": ["eval.csv"]"#;
    let configs = [
        (
            "offset",
            r#""axis": "offset", "values": [0.0], "spec_template": {"method": "mean"}"#,
        ),
        (
            "clusters",
            r#""axis": "clusters", "values": [1], "repeats": 2, "spec_template": {"method": "kmeans", "n_clusters": 1, "seed": 0}"#,
        ),
        (
            "fraction",
            r#""axis": "fraction", "values": [1.0], "repeats": 2, "spec_template": {"method": "mean"}"#,
        ),
    ];
    let mut values = Vec::new();
    for (name, body) in configs {
        let config = ws.write(&format!("{name}.json"), &format!("{{{body}, {base}}}"));
        ok(&[
            "sweep",
            "--config",
            &config,
            "--out",
            &ws.p(&format!("{name}.csv")),
        ]);
        let rows = result_rows(&ws.path(&format!("{name}.csv")));
        assert_eq!(rows.len(), 1);
        assert_eq!(rows[0].2, 0.0);
        values.push(rows[0].1);
    }
    assert_eq!(values[0], values[1]);
    assert_eq!(values[1], values[2]);
}

#[test]
fn sweep_fraction_std_shrinks_to_zero() {
    let ws = Workspace::new();
    sweep_inputs(&ws);
    let config = ws.write(
        "sweep.toml",
        r#"
axis = "fraction"
values = [0.01, 0.1, 1.0]
repeats = 8
base_seed = 21
anchor_source = "anchors.csv"
eval_sets = ["eval.csv"]

[spec_template]
method = "mean"
"#,
    );
    ok(&["sweep", "--config", &config, "--out", &ws.p("r.csv")]);
    let rows = result_rows(&ws.path("r.csv"));
    assert_eq!(
        rows.iter().map(|r| r.0).collect::<Vec<_>>(),
        vec![0.01, 0.1, 1.0]
    );
    assert!(rows[0].2 > 0.0);
    assert_eq!(rows[2].2, 0.0);
    assert!(rows[2].1 >= rows[0].1);

    ok(&[
        "sweep",
        "--config",
        &config,
        "--out",
        &ws.p("r.out"),
        "--format",
        "json",
    ]);
    let json: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(ws.path("r.out")).unwrap()).unwrap();
    assert_eq!(json["std"], "population");
    assert_eq!(json["rows"].as_array().unwrap().len(), 3);
}

#[test]
fn sweep_error_rows_exit_nonzero() {
    let ws = Workspace::new();
    sweep_inputs(&ws);
    let config = ws.write(
        "s.json",
        r#"{"axis": "clusters", "values": [1, 150], "repeats": 1, "base_seed": 0,
            "spec_template": {"method": "kmeans", "n_clusters": 1, "seed": 0},
            "anchor_source": "anchors.csv", "eval_sets": ["eval.csv"]}"#,
    );
    let err = fails(&["sweep", "--config", &config, "--out", &ws.p("r.csv")]);
    assert!(err.contains("150"), "{err}");
    let text = fs::read_to_string(ws.path("r.csv")).unwrap();
    assert_eq!(text.lines().count(), 3);
}

#[test]
fn sweep_names_unknown_config_key() {
    let ws = Workspace::new();
    sweep_inputs(&ws);
    let config = ws.write(
        "s.json",
        r#"{"axis": "offset", "values": [0.0], "base_seed": 0, "spec_template": {"method": "mean"},
            "anchor_source": "anchors.csv", "eval_sets": ["eval.csv"], "repeatz": 3}"#,
    );
    let err = fails(&["sweep", "--config", &config, "--out", &ws.p("r.csv")]);
    assert!(err.contains("repeatz"), "{err}");
    assert!(!ws.path("r.csv").exists());
}

#[test]
fn convert_round_trip_preserves_values() {
    let ws = Workspace::new();
    let csv = ws.write(
        "a.csv",
        "id,mos,is_reference,e0,e1,e2\nx,1.5,true,0.1,-2.25,3e-8\ny,,false,1,2,3\nz,-0.5,,0.333333,0,-0\n",
    );
    ok(&["convert", "--input", &csv, "--out", &ws.p("b.qseb")]);
    assert!(ws.path("b.qseb.meta.jsonl").exists());
    ok(&[
        "convert",
        "--input",
        &ws.p("b.qseb"),
        "--out",
        &ws.p("c.csv"),
    ]);
    let a = load_dataset(&ws.path("a.csv"), Format::Csv).unwrap();
    let c = load_dataset(&ws.path("c.csv"), Format::Csv).unwrap();
    assert_eq!(a.records(), c.records());

    // explicit formats override the extension
    ok(&[
        "convert",
        "--input",
        &ws.p("c.csv"),
        "--out",
        &ws.p("d.bin"),
        "--out-format",
        "qseb",
    ]);
    let d = load_dataset(&ws.path("d.bin"), Format::Qseb).unwrap();
    assert_eq!(d.records(), a.records());
}

#[test]
fn convert_rejects_corrupt_magic() {
    let ws = Workspace::new();
    let csv = ws.write("a.csv", TOY);
    ok(&["convert", "--input", &csv, "--out", &ws.p("b.qseb")]);
    let mut bytes = fs::read(ws.path("b.qseb")).unwrap();
    bytes[0] = b'X';
    fs::write(ws.path("b.qseb"), bytes).unwrap();
    let err = fails(&[
        "convert",
        "--input",
        &ws.p("b.qseb"),
        "--out",
        &ws.p("c.csv"),
    ]);
    assert!(err.to_lowercase().contains("magic"), "{err}");
}

#[test]
fn convert_rejects_header_sidecar_mismatch() {
    let ws = Workspace::new();
    let csv = ws.write("a.csv", TOY);
    ok(&["convert", "--input", &csv, "--out", &ws.p("b.qseb")]);

    // header claims a different dimension than the payload carries
    let mut bytes = fs::read(ws.path("b.qseb")).unwrap();
    bytes[8..12].copy_from_slice(&3u32.to_le_bytes());
    fs::write(ws.path("bad_dim.qseb"), bytes).unwrap();
    fs::copy(
        ws.path("b.qseb.meta.jsonl"),
        ws.path("bad_dim.qseb.meta.jsonl"),
    )
    .unwrap();
    fails(&[
        "convert",
        "--input",
        &ws.p("bad_dim.qseb"),
        "--out",
        &ws.p("c.csv"),
    ]);

    // sidecar lists fewer records than the header
    fs::copy(ws.path("b.qseb"), ws.path("short.qseb")).unwrap();
    let meta = fs::read_to_string(ws.path("b.qseb.meta.jsonl")).unwrap();
    let short: String = meta.lines().take(3).map(|l| format!("{l}\n")).collect();
    fs::write(ws.path("short.qseb.meta.jsonl"), short).unwrap();
    fails(&[
        "convert",
        "--input",
        &ws.p("short.qseb"),
        "--out",
        &ws.p("c.csv"),
    ]);
    assert!(!ws.path("c.csv").exists());
}

#[test]
fn threads_flag_must_be_positive() {
    let out = bin(&[
        "--threads",
        "0",
        "convert",
        "--input",
        "a.csv",
        "--out",
        "b.csv",
    ]);
    assert!(!out.status.success());
}

#[test]
fn record_order_is_kept_through_conversion() {
    let ws = Workspace::new();
    let records = ["m", "a", "z", "b"]
        .iter()
        .enumerate()
        .map(|(i, id)| EmbeddingRecord::new(*id, vec![i as f32, 1.0]).with_mos(i as f64));
    let d = EmbeddingDataset::from_records(2, "order", records).unwrap();
    save_dataset(&d, &ws.path("o.csv"), Format::Csv).unwrap();
    ok(&[
        "convert",
        "--input",
        &ws.p("o.csv"),
        "--out",
        &ws.p("o.qseb"),
    ]);
    let back = load_dataset(&ws.path("o.qseb"), Format::Qseb).unwrap();
    let ids: Vec<&str> = back.records().iter().map(|r| r.id.as_str()).collect();
    assert_eq!(ids, ["m", "a", "z", "b"]);
}
