//! `codesign`: generate synthetic datasets, co-optimize sensor layouts and
//! predictors, evaluate them, draw layouts and check gradients.
//!
//! Exit codes: 0 success, 1 gradient check failed, 2 I/O or schema error,
//! 3 numeric abort, 64 usage error.

mod exit;
mod manifest;

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;
use serde_json::json;

use codesign::data::{
    dataset_from_json, dataset_to_json, generate_synthetic_dataset, split_dataset, GenConfig,
    ShapeDataset,
};
use codesign::gradcheck::{run_gradcheck, GradcheckConfig, Term};
use codesign::layout::{apply_domain_constraints, LayoutFile};
use codesign::predictor::PredictorFile;
use codesign::rng::{substream, Stream};
use codesign::svg::layout_svg;
use codesign::trainer::{co_optimize_from, evaluate, Checkpoint, EpochRow, TrainConfig};
use codesign::{
    geometry::make_flat_surface, ConstraintMode, Error, Exec, LossConfig, PredictorParams,
    SensorLayout,
};

use exit::{usage_on_err, Failure};
use manifest::{emit, emit_json, manifest_path_for, read, RunManifest};

#[derive(Debug, Parser)]
#[command(
    name = "codesign",
    version,
    about = "Stretch-sensor layout co-optimization"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic deformation dataset.
    Generate(GenerateArgs),
    /// Jointly optimize a sensor layout and a shape predictor.
    Optimize(OptimizeArgs),
    /// Measure surface reconstruction error of a trained layout and predictor.
    Evaluate(EvaluateArgs),
    /// Draw a layout in the UV square as SVG.
    ExportSvg(ExportSvgArgs),
    /// Compare analytic gradients with finite differences.
    Gradcheck(GradcheckArgs),
}

#[derive(Debug, Args)]
struct GenerateArgs {
    #[arg(long, default_value_t = 15)]
    m: usize,
    #[arg(long, default_value_t = 15)]
    n: usize,
    #[arg(long, default_value_t = 2000)]
    count: usize,
    /// Number of sinusoidal deformation modes.
    #[arg(long, default_value_t = 6)]
    modes: usize,
    #[arg(long, default_value_t = 30.0)]
    amplitude_mm: f64,
    #[arg(long, default_value_t = 300.0)]
    width_mm: f64,
    #[arg(long, default_value_t = 300.0)]
    height_mm: f64,
    #[arg(long, default_value_t = 7)]
    seed: u64,
    #[arg(short, long)]
    out: PathBuf,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum ExecArg {
    Parallel,
    Sequential,
}

impl From<ExecArg> for Exec {
    fn from(e: ExecArg) -> Self {
        match e {
            ExecArg::Parallel => Exec::Parallel,
            ExecArg::Sequential => Exec::Sequential,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
#[value(rename_all = "snake_case")]
enum ConstraintArg {
    Free,
    HalfDomain,
    MirroredPairs,
}

impl From<ConstraintArg> for ConstraintMode {
    fn from(c: ConstraintArg) -> Self {
        match c {
            ConstraintArg::Free => ConstraintMode::Free,
            ConstraintArg::HalfDomain => ConstraintMode::HalfDomain,
            ConstraintArg::MirroredPairs => ConstraintMode::MirroredPairs,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "snake_case")]
enum SplitArg {
    Train,
    Test,
}

#[derive(Debug, Args)]
struct SplitOpts {
    /// Seed of the train/test permutation.
    #[arg(long, default_value_t = 1)]
    seed: u64,
    #[arg(long, default_value_t = 0.8)]
    train_fraction: f64,
}

#[derive(Debug, Args)]
struct OptimizeArgs {
    #[arg(long)]
    dataset: PathBuf,
    /// Output directory.
    #[arg(short, long)]
    out: PathBuf,
    #[command(flatten)]
    split: SplitOpts,
    #[arg(long, default_value_t = 100)]
    epochs: usize,
    #[arg(long, default_value_t = 16)]
    batch: usize,
    #[arg(long, default_value_t = 0.06)]
    lr: f64,
    #[arg(long, default_value_t = 20)]
    sensors: usize,
    /// Occupancy sharpness.
    #[arg(long, default_value_t = 10.0)]
    alpha: f64,
    /// Soft-min temperature, 1/mm.
    #[arg(long, default_value_t = 100.0)]
    beta: f64,
    /// Samples per sensor.
    #[arg(long = "K", default_value_t = 32)]
    k: usize,
    #[arg(long, default_value_t = 10.0)]
    tau_mm: f64,
    #[arg(long, default_value_t = 50.0)]
    lmin_mm: f64,
    #[arg(long, default_value_t = 0.005)]
    wt: f64,
    #[arg(long, default_value_t = 0.1)]
    wm: f64,
    #[arg(long, default_value_t = 0.6)]
    wp: f64,
    #[arg(long, default_value_t = 0.005)]
    ws: f64,
    #[arg(long, value_enum, default_value = "free")]
    constraint: ConstraintArg,
    /// Standard deviation of the training signal noise, mm.
    #[arg(long, default_value_t = codesign::trainer::DEFAULT_SIGNAL_NOISE_MM)]
    noise_mm: f64,
    /// Start from this layout instead of a random one.
    #[arg(long)]
    init_layout: Option<PathBuf>,
    /// Train only the predictor.
    #[arg(long)]
    freeze_layout: bool,
    #[arg(long, value_enum, default_value = "parallel")]
    exec: ExecArg,
}

#[derive(Debug, Args)]
struct EvaluateArgs {
    #[arg(long)]
    dataset: PathBuf,
    #[arg(long)]
    layout: PathBuf,
    #[arg(long)]
    predictor: PathBuf,
    /// Split(s) to evaluate; repeat or comma-separate for several.
    #[arg(long, value_enum, value_delimiter = ',', default_value = "test")]
    split: Vec<SplitArg>,
    #[command(flatten)]
    split_opts: SplitOpts,
    /// UV lattice size per side for surface distances.
    #[arg(long, default_value_t = 20)]
    grid: usize,
    #[arg(long = "K", default_value_t = 32)]
    k: usize,
    /// Metrics JSON. With several splits, the split name is appended to the
    /// file stem.
    #[arg(short, long)]
    out: PathBuf,
    /// Also write per-shape distances as CSV.
    #[arg(long)]
    per_shape_csv: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "parallel")]
    exec: ExecArg,
}

#[derive(Debug, Args)]
struct ExportSvgArgs {
    #[arg(long)]
    layout: PathBuf,
    /// Measure lengths on this dataset's base surface instead of a flat sheet.
    #[arg(long)]
    dataset: Option<PathBuf>,
    #[arg(long, default_value_t = 300.0)]
    width_mm: f64,
    #[arg(long, default_value_t = 300.0)]
    height_mm: f64,
    #[arg(long = "K", default_value_t = 32)]
    k: usize,
    #[arg(short, long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct GradcheckArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 20)]
    fixtures: usize,
    /// Restrict to these terms; repeat or comma-separate.
    #[arg(long, value_delimiter = ',')]
    loss: Vec<String>,
    #[arg(long, default_value_t = 1e-6)]
    step: f64,
    #[arg(long, default_value_t = 1e-4)]
    tolerance: f64,
    #[arg(long, value_enum, default_value = "parallel")]
    exec: ExecArg,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(exit::USAGE)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    let result = match cli.command {
        Command::Generate(a) => generate(a),
        Command::Optimize(a) => optimize(a),
        Command::Evaluate(a) => evaluate_cmd(a),
        Command::ExportSvg(a) => export_svg(a),
        Command::Gradcheck(a) => gradcheck(a),
    };
    match result {
        Ok(code) => ExitCode::from(code),
        Err(f) => {
            eprintln!("error: {f}");
            f.exit_code()
        }
    }
}

fn load_dataset(path: &Path, manifest: &mut RunManifest) -> Result<ShapeDataset, Failure> {
    let bytes = read(path)?;
    manifest.input(path, &bytes);
    let text = String::from_utf8(bytes).map_err(|e| Failure::io_other(path, e))?;
    Ok(dataset_from_json(&text, &path.display().to_string())?)
}

fn load_layout(path: &Path, manifest: &mut RunManifest) -> Result<SensorLayout, Failure> {
    let bytes = read(path)?;
    manifest.input(path, &bytes);
    let text = String::from_utf8_lossy(&bytes);
    Ok(LayoutFile::from_json(&text, &path.display().to_string())?.into_layout()?)
}

fn split(ds: &ShapeDataset, opts: &SplitOpts) -> Result<(ShapeDataset, ShapeDataset), Failure> {
    usage_on_err(split_dataset(ds, opts.train_fraction, opts.seed))
}

fn generate(a: GenerateArgs) -> Result<u8, Failure> {
    let cfg = GenConfig {
        m: a.m,
        n: a.n,
        width_mm: a.width_mm,
        height_mm: a.height_mm,
        count: a.count,
        modes: a.modes,
        amplitude_mm: a.amplitude_mm,
        seed: a.seed,
    };
    usage_on_err(cfg.validate())?;
    let mut manifest = RunManifest::new("generate", json!(cfg));
    let t = Instant::now();
    let ds = generate_synthetic_dataset(&cfg)?;
    manifest.phase("generate", t.elapsed().as_secs_f64());
    let t = Instant::now();
    emit(&mut manifest, &a.out, dataset_to_json(&ds)?.as_bytes())?;
    manifest.phase("write", t.elapsed().as_secs_f64());
    manifest.write(&manifest_path_for(&a.out))?;
    println!("wrote {} shapes to {}", ds.len(), a.out.display());
    Ok(exit::OK)
}

#[derive(Debug, Serialize)]
struct OptimizeConfig {
    dataset: String,
    sensors: usize,
    train_fraction: f64,
    split_seed: u64,
    init_layout: Option<String>,
    train: TrainConfig,
}

fn optimize(a: OptimizeArgs) -> Result<u8, Failure> {
    let loss = LossConfig {
        w_t: a.wt,
        w_m: a.wm,
        w_p: a.wp,
        w_s: a.ws,
        tau: a.tau_mm,
        l_min: a.lmin_mm,
        alpha: a.alpha,
        beta: a.beta,
        samples: a.k,
    };
    let cfg = TrainConfig {
        learning_rate: a.lr,
        epochs: a.epochs,
        batch_size: a.batch,
        seed: a.split.seed,
        constraint_mode: a.constraint.into(),
        loss,
        freeze_layout: a.freeze_layout,
        signal_noise_mm: a.noise_mm,
        exec: a.exec.into(),
    };
    usage_on_err(cfg.validate())?;
    if a.init_layout.is_none() {
        usage_on_err(cfg.constraint_mode.check_count(a.sensors))?;
    }

    let resolved = OptimizeConfig {
        dataset: a.dataset.display().to_string(),
        sensors: a.sensors,
        train_fraction: a.split.train_fraction,
        split_seed: a.split.seed,
        init_layout: a.init_layout.as_ref().map(|p| p.display().to_string()),
        train: cfg,
    };
    let mut manifest = RunManifest::new("optimize", json!(resolved));
    let out = &a.out;

    let t = Instant::now();
    let ds = load_dataset(&a.dataset, &mut manifest)?;
    let (train, test) = split(&ds, &a.split)?;
    let layout = match &a.init_layout {
        Some(path) => {
            let layout = load_layout(path, &mut manifest)?;
            usage_on_err(cfg.constraint_mode.check_count(layout.len()))?;
            layout
        }
        None => usage_on_err(SensorLayout::random(
            a.sensors,
            a.alpha,
            &mut substream(cfg.seed, Stream::Layout),
        ))?,
    };
    let layout = apply_domain_constraints(&layout, cfg.constraint_mode)?;
    let params = PredictorParams::init(layout.len(), train.m(), train.n(), cfg.seed)?;
    manifest.phase("load", t.elapsed().as_secs_f64());

    emit_json(&mut manifest, &out.join("config.json"), &resolved)?;

    let t = Instant::now();
    let mut written: Vec<(PathBuf, Vec<u8>)> = Vec::new();
    let mut on_epoch = |row: &EpochRow, layout: &SensorLayout, params: &PredictorParams| {
        println!(
            "epoch {:>3}  recon {:>10.4}  overlap {:>8.4}  active {:>2}  crossings {}",
            row.epoch, row.test_recon, row.overlap, row.active_count, row.intersections
        );
        for (path, bytes) in [
            (
                out.join(format!("layout_epoch_{}.json", row.epoch)),
                pretty(&LayoutFile::raw(layout)),
            ),
            (
                out.join(format!("predictor_epoch_{}.json", row.epoch)),
                pretty(&PredictorFile::from(params)),
            ),
        ] {
            manifest::write_atomic(&path, &bytes)
                .map_err(|f| Error::InvalidState(f.message.clone()))?;
            written.push((path, bytes));
        }
        Ok(())
    };
    let result = co_optimize_from(&train, &test, &layout, params, &cfg, &mut on_epoch);
    for (path, bytes) in &written {
        manifest.output(path, bytes);
    }
    let report = match result {
        Ok(r) => r,
        Err(Error::NumericAbort {
            step,
            reason,
            checkpoint,
        }) => {
            write_checkpoint(&mut manifest, &out.join("abort"), &checkpoint)?;
            manifest.phase("train", t.elapsed().as_secs_f64());
            manifest.write(&out.join("manifest.json"))?;
            return Err(Failure {
                code: exit::NUMERIC_ABORT,
                message: format!(
                    "numeric abort at step {step}: {reason}; last good state in {}",
                    out.join("abort").display()
                ),
            });
        }
        Err(e) => return Err(e.into()),
    };
    manifest.phase("train", t.elapsed().as_secs_f64());

    let t = Instant::now();
    emit(
        &mut manifest,
        &out.join("steps.csv"),
        report.steps_csv().as_bytes(),
    )?;
    emit(
        &mut manifest,
        &out.join("epochs.csv"),
        report.epochs_csv().as_bytes(),
    )?;
    let final_dir = out.join("final");
    emit_json(
        &mut manifest,
        &final_dir.join("layout.json"),
        &LayoutFile::export(&report.final_layout),
    )?;
    emit_json(
        &mut manifest,
        &final_dir.join("predictor.json"),
        &PredictorFile::from(&report.final_params),
    )?;
    manifest.phase("write", t.elapsed().as_secs_f64());
    manifest.write(&out.join("manifest.json"))?;
    Ok(exit::OK)
}

fn pretty<T: Serialize>(value: &T) -> Vec<u8> {
    let mut text = serde_json::to_string_pretty(value).expect("serializable");
    text.push('\n');
    text.into_bytes()
}

fn write_checkpoint(
    manifest: &mut RunManifest,
    dir: &Path,
    checkpoint: &Checkpoint,
) -> Result<(), Failure> {
    emit_json(
        manifest,
        &dir.join("layout.json"),
        &LayoutFile::raw(&checkpoint.layout),
    )?;
    emit_json(
        manifest,
        &dir.join("predictor.json"),
        &PredictorFile::from(&checkpoint.params),
    )?;
    emit_json(
        manifest,
        &dir.join("position.json"),
        &json!({ "epoch": checkpoint.epoch, "step": checkpoint.step }),
    )
}

fn with_suffix(path: &Path, suffix: &str) -> PathBuf {
    let stem = path.file_stem().unwrap_or_default().to_string_lossy();
    let name = match path.extension() {
        Some(ext) => format!("{stem}_{suffix}.{}", ext.to_string_lossy()),
        None => format!("{stem}_{suffix}"),
    };
    path.with_file_name(name)
}

fn evaluate_cmd(a: EvaluateArgs) -> Result<u8, Failure> {
    if a.grid < 2 {
        return Err(Failure::usage("--grid must be at least 2"));
    }
    if a.k < 2 {
        return Err(Failure::usage("--K must be at least 2"));
    }
    let mut splits = a.split.clone();
    splits.dedup();
    let config = json!({
        "splits": splits,
        "split_seed": a.split_opts.seed,
        "train_fraction": a.split_opts.train_fraction,
        "grid": a.grid,
        "samples": a.k,
    });
    let mut manifest = RunManifest::new("evaluate", config);

    let t = Instant::now();
    let ds = load_dataset(&a.dataset, &mut manifest)?;
    let layout = load_layout(&a.layout, &mut manifest)?;
    let bytes = read(&a.predictor)?;
    manifest.input(&a.predictor, &bytes);
    let params = PredictorFile::from_json(
        &String::from_utf8_lossy(&bytes),
        &a.predictor.display().to_string(),
    )?
    .into_params(Some((layout.len(), ds.m(), ds.n())))?;
    let (train, test) = split(&ds, &a.split_opts)?;
    manifest.phase("load", t.elapsed().as_secs_f64());

    for &which in &splits {
        let t = Instant::now();
        let part = match which {
            SplitArg::Train => &train,
            SplitArg::Test => &test,
        };
        let metrics = evaluate(&layout, &params, &ds.base, part, a.grid, a.k, a.exec.into())?;
        let name = match which {
            SplitArg::Train => "train",
            SplitArg::Test => "test",
        };
        let (out, csv) = if splits.len() > 1 {
            (
                with_suffix(&a.out, name),
                a.per_shape_csv.as_deref().map(|p| with_suffix(p, name)),
            )
        } else {
            (a.out.clone(), a.per_shape_csv.clone())
        };
        emit_json(&mut manifest, &out, &metrics)?;
        if let Some(csv) = csv {
            emit(&mut manifest, &csv, metrics.per_shape_csv().as_bytes())?;
        }
        manifest.phase(&format!("evaluate_{name}"), t.elapsed().as_secs_f64());
        println!(
            "{name}: max of average {:.4} mm, mean of average {:.4} mm over {} shapes",
            metrics.max_of_avg_mm,
            metrics.mean_of_avg_mm,
            part.len()
        );
    }
    manifest.write(&manifest_path_for(&a.out))?;
    Ok(exit::OK)
}

fn export_svg(a: ExportSvgArgs) -> Result<u8, Failure> {
    if a.k < 2 {
        return Err(Failure::usage("--K must be at least 2"));
    }
    let mut manifest = RunManifest::new(
        "export-svg",
        json!({
            "width_mm": a.width_mm,
            "height_mm": a.height_mm,
            "samples": a.k,
            "dataset": a.dataset.as_ref().map(|p| p.display().to_string()),
        }),
    );
    let t = Instant::now();
    let layout = load_layout(&a.layout, &mut manifest)?;
    let surface = match &a.dataset {
        Some(path) => load_dataset(path, &mut manifest)?.base_surface()?,
        None => usage_on_err(make_flat_surface(4, 4, a.width_mm, a.height_mm))?,
    };
    let svg = layout_svg(&layout, &surface, a.k)?;
    emit(&mut manifest, &a.out, svg.as_bytes())?;
    manifest.phase("export", t.elapsed().as_secs_f64());
    manifest.write(&manifest_path_for(&a.out))?;
    Ok(exit::OK)
}

fn gradcheck(a: GradcheckArgs) -> Result<u8, Failure> {
    let terms = if a.loss.is_empty() {
        Term::ALL.to_vec()
    } else {
        a.loss
            .iter()
            .map(|s| usage_on_err(s.parse::<Term>()))
            .collect::<Result<Vec<_>, _>>()?
    };
    if a.fixtures == 0 {
        return Err(Failure::usage("--fixtures must be positive"));
    }
    if !(a.step > 0.0 && a.tolerance > 0.0) {
        return Err(Failure::usage("--step and --tolerance must be positive"));
    }
    let cfg = GradcheckConfig {
        seed: a.seed,
        fixtures: a.fixtures,
        terms,
        step: a.step,
        tolerance: a.tolerance,
        exec: a.exec.into(),
    };
    let report = run_gradcheck(&cfg)?;
    print!("{}", report.table());
    if report.passed() {
        println!("all terms within {:e}", report.tolerance);
        Ok(exit::OK)
    } else {
        println!("some terms exceed {:e}", report.tolerance);
        Ok(exit::CHECK_FAILED)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn suffix_goes_before_extension() {
        assert_eq!(
            with_suffix(Path::new("out/metrics.json"), "train"),
            PathBuf::from("out/metrics_train.json")
        );
        assert_eq!(with_suffix(Path::new("m"), "test"), PathBuf::from("m_test"));
    }

    #[test]
    fn cli_definition_is_consistent() {
        use clap::CommandFactory;
        Cli::command().debug_assert();
    }
}
