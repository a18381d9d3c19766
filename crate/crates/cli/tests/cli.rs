use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use codesign::layout::LayoutFile;
use codesign::predictor::PredictorFile;
use codesign::{PredictorParams, Sensor, SensorLayout};
use serde_json::Value;
use tempfile::TempDir;

fn codesign(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_codesign"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exited normally")
}

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn fixture(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR"))
        .join("tests/fixtures")
        .join(name)
}

fn read_json(path: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

fn small_dataset(dir: &Path, extra: &[&str]) -> PathBuf {
    let path = dir.join("ds.json");
    let mut args = vec![
        "generate",
        "--count",
        "40",
        "--m",
        "6",
        "--n",
        "6",
        "--seed",
        "3",
        "-o",
        s(&path),
    ];
    args.extend_from_slice(extra);
    let out = codesign(&args);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    path
}

fn write_layout(path: &Path, layout: &SensorLayout) {
    fs::write(
        path,
        serde_json::to_string(&LayoutFile::raw(layout)).unwrap(),
    )
    .unwrap();
}

#[test]
fn generate_writes_requested_count_and_is_reproducible() {
    let dir = TempDir::new().unwrap();
    let a = small_dataset(dir.path(), &[]);
    let ds = read_json(&a);
    assert_eq!(ds["shapes"].as_array().unwrap().len(), 40);
    assert_eq!(ds["format_version"], 1);

    let manifest = read_json(&dir.path().join("ds.json.manifest.json"));
    assert_eq!(manifest["command"], "generate");
    let first = manifest["outputs"][0]["sha256"].clone();

    let again = codesign(&[
        "generate",
        "--count",
        "40",
        "--m",
        "6",
        "--n",
        "6",
        "--seed",
        "3",
        "-o",
        s(&a),
    ]);
    assert_eq!(code(&again), 0);
    let manifest = read_json(&dir.path().join("ds.json.manifest.json"));
    assert_eq!(manifest["outputs"][0]["sha256"], first);
}

#[test]
fn missing_or_invalid_flags_are_usage_errors() {
    assert_eq!(code(&codesign(&["generate", "--count", "5"])), 64);
    assert_eq!(code(&codesign(&["frobnicate"])), 64);
    let dir = TempDir::new().unwrap();
    let out = dir.path().join("x.json");
    assert_eq!(
        code(&codesign(&["generate", "--count", "0", "-o", s(&out)])),
        64
    );
    assert!(!out.exists());
    assert_eq!(code(&codesign(&["--help"])), 0);
}

#[test]
fn unwritable_output_is_an_io_error() {
    let dir = TempDir::new().unwrap();
    let blocker = dir.path().join("file");
    fs::write(&blocker, "x").unwrap();
    let out = codesign(&[
        "generate",
        "--count",
        "4",
        "--m",
        "4",
        "--n",
        "4",
        "-o",
        s(&blocker.join("ds.json")),
    ]);
    assert_eq!(code(&out), 2, "{}", stderr(&out));
}

#[test]
fn zero_epochs_keep_the_initial_layout() {
    let dir = TempDir::new().unwrap();
    let ds = small_dataset(dir.path(), &[]);
    let init = SensorLayout::new(
        vec![
            Sensor::new(0.1, 0.1, 0.9, 0.3),
            Sensor::new(0.2, 0.7, 0.6, 0.9),
        ],
        vec![0.7, -0.4],
        10.0,
    )
    .unwrap();
    let init_path = dir.path().join("init.json");
    write_layout(&init_path, &init);
    let run = dir.path().join("run");
    let out = codesign(&[
        "optimize",
        "--dataset",
        s(&ds),
        "--epochs",
        "0",
        "--init-layout",
        s(&init_path),
        "-o",
        s(&run),
    ]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let fin = LayoutFile::from_json(
        &fs::read_to_string(run.join("final/layout.json")).unwrap(),
        "final",
    )
    .unwrap();
    assert_eq!(fin.sensors, init.sensors);
    assert_eq!(fin.logits, init.logits);
    assert_eq!(fin.active.unwrap(), vec![init.sensors[0]]);
    for name in [
        "config.json",
        "steps.csv",
        "epochs.csv",
        "manifest.json",
        "layout_epoch_0.json",
        "predictor_epoch_0.json",
    ] {
        assert!(run.join(name).exists(), "{name}");
    }
}

#[test]
fn optimize_writes_checkpoints_and_summaries() {
    let dir = TempDir::new().unwrap();
    let ds = small_dataset(dir.path(), &[]);
    let run = dir.path().join("run");
    let out = codesign(&[
        "optimize",
        "--dataset",
        s(&ds),
        "--epochs",
        "2",
        "--sensors",
        "6",
        "--K",
        "8",
        "-o",
        s(&run),
    ]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let text = stdout(&out);
    assert_eq!(text.lines().filter(|l| l.starts_with("epoch")).count(), 3);
    assert!(text.contains("recon") && text.contains("overlap") && text.contains("active"));
    for e in 0..=2 {
        assert!(run.join(format!("layout_epoch_{e}.json")).exists());
        assert!(run.join(format!("predictor_epoch_{e}.json")).exists());
    }
    let epochs = fs::read_to_string(run.join("epochs.csv")).unwrap();
    assert_eq!(epochs.lines().count(), 4);
    let steps = fs::read_to_string(run.join("steps.csv")).unwrap();
    assert!(steps.starts_with("step,epoch,recon"));

    let config = read_json(&run.join("config.json"));
    assert_eq!(config["train"]["loss"]["samples"], 8);
    assert_eq!(config["sensors"], 6);

    let manifest = read_json(&run.join("manifest.json"));
    let inputs = manifest["inputs"].as_array().unwrap();
    assert_eq!(inputs.len(), 1);
    let digest = codesign_digest(&ds);
    assert_eq!(inputs[0]["sha256"], digest);
    let phases: Vec<&str> = manifest["timings"]
        .as_array()
        .unwrap()
        .iter()
        .map(|p| p["name"].as_str().unwrap())
        .collect();
    assert_eq!(phases, ["load", "train", "write"]);

    let rerun = dir.path().join("rerun");
    let out = codesign(&[
        "optimize",
        "--dataset",
        s(&ds),
        "--epochs",
        "2",
        "--sensors",
        "6",
        "--K",
        "8",
        "--exec",
        "sequential",
        "-o",
        s(&rerun),
    ]);
    assert_eq!(code(&out), 0);
    for name in [
        "steps.csv",
        "epochs.csv",
        "final/layout.json",
        "final/predictor.json",
    ] {
        assert_eq!(
            fs::read(run.join(name)).unwrap(),
            fs::read(rerun.join(name)).unwrap(),
            "{name}"
        );
    }
}

fn codesign_digest(path: &Path) -> String {
    use sha2::{Digest, Sha256};
    hex::encode(Sha256::digest(fs::read(path).unwrap()))
}

#[test]
fn odd_mirrored_sensor_count_is_a_usage_error() {
    let dir = TempDir::new().unwrap();
    let ds = small_dataset(dir.path(), &[]);
    let out = codesign(&[
        "optimize",
        "--dataset",
        s(&ds),
        "--constraint",
        "mirrored_pairs",
        "--sensors",
        "9",
        "-o",
        s(&dir.path().join("run")),
    ]);
    assert_eq!(code(&out), 64);
    assert!(stderr(&out).contains("even"));
}

#[test]
fn numeric_abort_exits_3_and_keeps_the_checkpoint() {
    let dir = TempDir::new().unwrap();
    let ds = small_dataset(dir.path(), &[]);
    let run = dir.path().join("run");
    let out = codesign(&[
        "optimize",
        "--dataset",
        s(&ds),
        "--epochs",
        "1",
        "--sensors",
        "4",
        "--lr",
        "1e308",
        "-o",
        s(&run),
    ]);
    assert_eq!(code(&out), 3, "{}", stderr(&out));
    let layout = LayoutFile::from_json(
        &fs::read_to_string(run.join("abort/layout.json")).unwrap(),
        "abort",
    )
    .unwrap()
    .into_layout()
    .unwrap();
    assert!(layout
        .sensors
        .iter()
        .all(|s| s.to_array().iter().all(|x| x.is_finite())));
    assert!(run.join("abort/predictor.json").exists());
    assert!(run.join("manifest.json").exists());
}

#[test]
fn oracle_predictor_gives_zero_metrics() {
    let dir = TempDir::new().unwrap();
    let ds = small_dataset(dir.path(), &["--amplitude-mm", "0"]);
    let layout = SensorLayout::new(vec![Sensor::new(0.1, 0.1, 0.8, 0.9)], vec![1.0], 10.0).unwrap();
    let layout_path = dir.path().join("layout.json");
    write_layout(&layout_path, &layout);
    let predictor = PredictorParams::zeroed(1, 6, 6).unwrap();
    let predictor_path = dir.path().join("predictor.json");
    fs::write(
        &predictor_path,
        serde_json::to_string(&PredictorFile::from(&predictor)).unwrap(),
    )
    .unwrap();

    let metrics = dir.path().join("metrics.json");
    let csv = dir.path().join("per_shape.csv");
    let out = codesign(&[
        "evaluate",
        "--dataset",
        s(&ds),
        "--layout",
        s(&layout_path),
        "--predictor",
        s(&predictor_path),
        "-o",
        s(&metrics),
        "--per-shape-csv",
        s(&csv),
    ]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let m = read_json(&metrics);
    assert_eq!(m["max_of_avg_mm"], 0.0);
    assert_eq!(m["mean_of_avg_mm"], 0.0);
    assert!(m["per_shape_max_mm"]
        .as_array()
        .unwrap()
        .iter()
        .all(|x| x == 0.0));
    assert_eq!(fs::read_to_string(&csv).unwrap().lines().count(), 1 + 8);
}

#[test]
fn evaluate_both_splits_and_reject_mismatched_predictor() {
    let dir = TempDir::new().unwrap();
    let ds = small_dataset(dir.path(), &[]);
    let run = dir.path().join("run");
    let out = codesign(&[
        "optimize",
        "--dataset",
        s(&ds),
        "--epochs",
        "1",
        "--sensors",
        "4",
        "--K",
        "8",
        "-o",
        s(&run),
    ]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let layout = run.join("final/layout.json");
    let predictor = run.join("final/predictor.json");

    let metrics = dir.path().join("metrics.json");
    let out = codesign(&[
        "evaluate",
        "--dataset",
        s(&ds),
        "--layout",
        s(&layout),
        "--predictor",
        s(&predictor),
        "--split",
        "train,test",
        "--grid",
        "5",
        "-o",
        s(&metrics),
    ]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let train = read_json(&dir.path().join("metrics_train.json"));
    let test = read_json(&dir.path().join("metrics_test.json"));
    assert_eq!(train["per_shape_avg_mm"].as_array().unwrap().len(), 32);
    assert_eq!(test["per_shape_avg_mm"].as_array().unwrap().len(), 8);
    assert_ne!(train, test);

    let wrong = PredictorParams::zeroed(5, 6, 6).unwrap();
    let wrong_path = dir.path().join("wrong.json");
    fs::write(
        &wrong_path,
        serde_json::to_string(&PredictorFile::from(&wrong)).unwrap(),
    )
    .unwrap();
    let out = codesign(&[
        "evaluate",
        "--dataset",
        s(&ds),
        "--layout",
        s(&layout),
        "--predictor",
        s(&wrong_path),
        "-o",
        s(&metrics),
    ]);
    assert_eq!(code(&out), 2);
    assert!(
        stderr(&out).contains("5 sensors on a 6x6 grid"),
        "{}",
        stderr(&out)
    );
}

#[test]
fn svg_matches_golden_file() {
    let dir = TempDir::new().unwrap();
    let out_path = dir.path().join("layout.svg");
    let out = codesign(&[
        "export-svg",
        "--layout",
        s(&fixture("layout.json")),
        "-o",
        s(&out_path),
    ]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    assert_eq!(
        fs::read(&out_path).unwrap(),
        fs::read(fixture("layout.svg")).unwrap()
    );
}

#[test]
fn svg_with_no_active_sensors() {
    let dir = TempDir::new().unwrap();
    let layout =
        SensorLayout::new(vec![Sensor::new(0.1, 0.1, 0.5, 0.5)], vec![-3.0], 10.0).unwrap();
    let path = dir.path().join("l.json");
    write_layout(&path, &layout);
    let svg = dir.path().join("l.svg");
    assert_eq!(
        code(&codesign(&[
            "export-svg",
            "--layout",
            s(&path),
            "-o",
            s(&svg)
        ])),
        0
    );
    let text = fs::read_to_string(&svg).unwrap();
    assert!(text.starts_with("<svg") && text.trim_end().ends_with("</svg>"));
    assert!(text.contains("active: 0"));
    assert!(!text.contains("stroke=\"black\" stroke-width=\"0.006"));
}

fn line_coords(svg: &str) -> Vec<[f64; 4]> {
    svg.lines()
        .filter(|l| l.starts_with("<line"))
        .map(|l| {
            let get = |key: &str| -> f64 {
                let start = l.find(&format!(" {key}=\"")).unwrap() + key.len() + 3;
                l[start..].split('"').next().unwrap().parse().unwrap()
            };
            [get("x1"), get("y1"), get("x2"), get("y2")]
        })
        .collect()
}

#[test]
fn mirrored_layout_svg_is_reflection_symmetric() {
    let dir = TempDir::new().unwrap();
    let ds = small_dataset(dir.path(), &[]);
    let run = dir.path().join("run");
    let out = codesign(&[
        "optimize",
        "--dataset",
        s(&ds),
        "--epochs",
        "1",
        "--sensors",
        "6",
        "--K",
        "8",
        "--constraint",
        "mirrored_pairs",
        "-o",
        s(&run),
    ]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let svg = dir.path().join("m.svg");
    let out = codesign(&[
        "export-svg",
        "--layout",
        s(&run.join("final/layout.json")),
        "-o",
        s(&svg),
    ]);
    assert_eq!(code(&out), 0);
    let lines = line_coords(&fs::read_to_string(&svg).unwrap());
    assert_eq!(lines.len(), 6);
    for pair in lines.chunks(2) {
        let [a, b] = [pair[0], pair[1]];
        assert!((b[0] - (1.0 - a[0])).abs() <= 1e-6 && (b[2] - (1.0 - a[2])).abs() <= 1e-6);
        assert_eq!((a[1], a[3]), (b[1], b[3]));
    }
}

#[test]
fn malformed_layout_is_a_parse_error() {
    let dir = TempDir::new().unwrap();
    let path = dir.path().join("bad.json");
    fs::write(&path, "{\"alpha\": 10, \"sensors\": [[0.1, 0.2").unwrap();
    let out = codesign(&[
        "export-svg",
        "--layout",
        s(&path),
        "-o",
        s(&dir.path().join("x.svg")),
    ]);
    assert_eq!(code(&out), 2);
    assert!(stderr(&out).contains("parse error"));
}

#[test]
fn gradcheck_single_term() {
    let out = codesign(&["gradcheck", "--loss", "overlap", "--fixtures", "4"]);
    assert_eq!(code(&out), 0, "{}", stdout(&out));
    let rows: Vec<String> = stdout(&out)
        .lines()
        .skip(1)
        .filter(|l| l.ends_with("ok") || l.ends_with("FAIL"))
        .map(String::from)
        .collect();
    assert_eq!(rows.len(), 1);
    assert!(rows[0].starts_with("overlap"));
    assert_eq!(code(&codesign(&["gradcheck", "--loss", "curvature"])), 64);
}

#[test]
fn gradcheck_verdict_is_stable_across_seeds() {
    for seed in 1..=5 {
        let out = codesign(&["gradcheck", "--seed", &seed.to_string()]);
        assert_eq!(code(&out), 0, "seed {seed}:\n{}", stdout(&out));
    }
}

#[test]
fn impossible_tolerance_fails_the_check() {
    let out = codesign(&[
        "gradcheck",
        "--loss",
        "recon",
        "--fixtures",
        "2",
        "--tolerance",
        "1e-30",
    ]);
    assert_eq!(code(&out), 1);
    assert!(stdout(&out).contains("FAIL"));
}
