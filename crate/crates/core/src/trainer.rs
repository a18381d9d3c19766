//! Joint Adam optimization of the sensor layout and the shape predictor.

use std::fmt::Write as _;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::data::ShapeDataset;
use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::geometry::BSplineSurface;
use crate::grad::{backward_total, forward_total_with_noise, GradientBundle, SignalNoise};
use crate::layout::{
    active_sensors, project_in_place, sensor_lengths, signal_vector, ConstraintMode, SensorLayout,
    ACTIVE_THRESHOLD,
};
use crate::losses::{
    count_intersections, loss_overlap, loss_recon, sampled_min_distance, sensor_pairs,
    LossBreakdown, LossConfig,
};
use crate::predictor::{BaseShape, Mode, PredictorParams, BN_MOMENTUM};
use crate::rng::{substream, Stream};

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;
pub const DEFAULT_SIGNAL_NOISE_MM: f64 = 2.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub constraint_mode: ConstraintMode,
    pub loss: LossConfig,
    /// Keep `(L, b)` fixed and train only the predictor.
    pub freeze_layout: bool,
    /// Standard deviation (mm) of Gaussian noise added to every training
    /// signal, redrawn each step. Evaluation always uses clean signals.
    pub signal_noise_mm: f64,
    pub exec: Exec,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 0.06,
            epochs: 100,
            batch_size: 16,
            seed: 0,
            constraint_mode: ConstraintMode::Free,
            loss: LossConfig::default(),
            freeze_layout: false,
            signal_noise_mm: DEFAULT_SIGNAL_NOISE_MM,
            exec: Exec::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0) || !self.learning_rate.is_finite() {
            return Err(Error::invalid("learning rate must be finite and positive"));
        }
        if !(self.signal_noise_mm >= 0.0) || !self.signal_noise_mm.is_finite() {
            return Err(Error::invalid(
                "signal noise must be finite and nonnegative",
            ));
        }
        if self.batch_size < 2 {
            return Err(Error::invalid("batch size must be at least 2"));
        }
        self.loss.validate()
    }
}

/// First and second moment accumulators for every scalar parameter.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamState {
    pub fn new(len: usize) -> Self {
        AdamState {
            m: vec![0.0; len],
            v: vec![0.0; len],
            t: 0,
            beta1: ADAM_BETA1,
            beta2: ADAM_BETA2,
            eps: ADAM_EPS,
        }
    }
}

/// One bias-corrected Adam update of `params` in place.
pub fn adam_step(state: &mut AdamState, params: &mut [f64], grads: &[f64], lr: f64) -> Result<()> {
    if params.len() != state.m.len() || grads.len() != state.m.len() {
        return Err(Error::invalid(format!(
            "adam state has {} slots, got {} parameters and {} gradients",
            state.m.len(),
            params.len(),
            grads.len()
        )));
    }
    if let Some(i) = grads.iter().position(|g| !g.is_finite()) {
        return Err(Error::Numeric(format!("non-finite gradient at slot {i}")));
    }
    state.t += 1;
    let t = state.t as i32;
    let c1 = 1.0 - state.beta1.powi(t);
    let c2 = 1.0 - state.beta2.powi(t);
    for (((x, &g), m), v) in params
        .iter_mut()
        .zip(grads)
        .zip(&mut state.m)
        .zip(&mut state.v)
    {
        *m = state.beta1 * *m + (1.0 - state.beta1) * g;
        *v = state.beta2 * *v + (1.0 - state.beta2) * g * g;
        let m_hat = *m / c1;
        let v_hat = *v / c2;
        *x -= lr * m_hat / (v_hat.sqrt() + state.eps);
    }
    Ok(())
}

/// Last parameters known to be finite.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub epoch: usize,
    pub step: usize,
    pub layout: SensorLayout,
    pub params: PredictorParams,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct StepRow {
    pub step: usize,
    pub epoch: usize,
    #[serde(flatten)]
    pub loss: LossBreakdown,
    pub active_count: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct EpochRow {
    pub epoch: usize,
    pub active_count: usize,
    pub intersections: usize,
    /// Exact sampled distance between the closest active pair on the base
    /// surface; infinite with fewer than two active sensors.
    pub min_distance_mm: f64,
    /// Shortest active sensor on the base surface; infinite if none.
    pub min_length_mm: f64,
    /// Occupancy-weighted overlap loss of the whole layout.
    pub overlap: f64,
    pub test_recon: f64,
}

#[derive(Debug, Clone)]
pub struct TrainReport {
    pub steps: Vec<StepRow>,
    /// Row 0 describes the initial state, row `e` the state after epoch `e`.
    pub epochs: Vec<EpochRow>,
    /// Layout after each logged epoch, aligned with `epochs`.
    pub epoch_layouts: Vec<SensorLayout>,
    pub final_layout: SensorLayout,
    pub final_params: PredictorParams,
    pub wall_time_s: f64,
}

impl TrainReport {
    pub fn steps_csv(&self) -> String {
        steps_csv(&self.steps)
    }

    pub fn epochs_csv(&self) -> String {
        epochs_csv(&self.epochs)
    }
}

fn fmt_f(x: f64) -> String {
    if x.is_infinite() {
        if x > 0.0 { "inf" } else { "-inf" }.to_string()
    } else {
        format!("{x:?}")
    }
}

pub fn steps_csv(rows: &[StepRow]) -> String {
    let mut out = String::from(
        "step,epoch,recon,total_length,min_length,overlap,min_space,total,active_count\n",
    );
    for r in rows {
        let l = &r.loss;
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{},{}",
            r.step,
            r.epoch,
            fmt_f(l.recon),
            fmt_f(l.total_length),
            fmt_f(l.min_length),
            fmt_f(l.overlap),
            fmt_f(l.min_space),
            fmt_f(l.total),
            r.active_count
        );
    }
    out
}

pub fn epochs_csv(rows: &[EpochRow]) -> String {
    let mut out = String::from(
        "epoch,active_count,intersections,min_distance_mm,min_length_mm,overlap,test_recon\n",
    );
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{}",
            r.epoch,
            r.active_count,
            r.intersections,
            fmt_f(r.min_distance_mm),
            fmt_f(r.min_length_mm),
            fmt_f(r.overlap),
            fmt_f(r.test_recon)
        );
    }
    out
}

fn layout_overlap(layout: &SensorLayout) -> f64 {
    let occ = layout.occupancy();
    sensor_pairs(layout.len())
        .into_iter()
        .map(|(i, j)| {
            occ[i] * occ[j] * loss_overlap(&layout.sensors[i], &layout.sensors[j], layout.alpha)
        })
        .sum()
}

/// Layout diagnostics on a reference surface.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LayoutDiagnostics {
    pub active_count: usize,
    pub intersections: usize,
    pub min_distance_mm: f64,
    pub min_length_mm: f64,
}

pub fn layout_diagnostics(
    surface: &BSplineSurface,
    layout: &SensorLayout,
    samples: usize,
) -> Result<LayoutDiagnostics> {
    let active = active_sensors(layout, ACTIVE_THRESHOLD);
    let lengths = sensor_lengths(surface, layout, samples)?;
    let min_length_mm = active
        .iter()
        .map(|&k| lengths[k])
        .fold(f64::INFINITY, f64::min);
    let mut min_distance_mm = f64::INFINITY;
    for (a, &i) in active.iter().enumerate() {
        for &j in &active[a + 1..] {
            let d = sampled_min_distance(surface, &layout.sensors[i], &layout.sensors[j], samples)?;
            min_distance_mm = min_distance_mm.min(d);
        }
    }
    Ok(LayoutDiagnostics {
        active_count: active.len(),
        intersections: count_intersections(layout, &active),
        min_distance_mm,
        min_length_mm,
    })
}

fn masked_signals(
    surfaces: &[BSplineSurface],
    layout: &SensorLayout,
    samples: usize,
    exec: Exec,
) -> Result<Vec<Vec<f64>>> {
    exec.try_map(surfaces.len(), |s| {
        Ok(signal_vector(&surfaces[s], layout, samples)?.values)
    })
}

/// Reconstruction error over a whole dataset with inference-mode batch norm.
fn draw_noise(rng: &mut ChaCha8Rng, rows: usize, cols: usize, sd: f64) -> SignalNoise {
    if sd == 0.0 {
        return SignalNoise::default();
    }
    let normal = Normal::new(0.0, sd).expect("finite nonnegative sd");
    SignalNoise {
        offset: (0..rows)
            .map(|_| (0..cols).map(|_| normal.sample(rng)).collect())
            .collect(),
    }
}

/// Replaces the running batch-norm statistics with the population statistics
/// of the whole training set under the current layout and weights.
fn recalibrate(
    params: &mut PredictorParams,
    surfaces: &[BSplineSurface],
    base: &BaseShape,
    layout: &SensorLayout,
    cfg: &TrainConfig,
    rng: &mut ChaCha8Rng,
) -> Result<()> {
    let signals = masked_signals(surfaces, layout, cfg.loss.samples, cfg.exec)?;
    let signals = draw_noise(rng, signals.len(), layout.len(), cfg.signal_noise_mm).apply(signals);
    let forward = params.forward_with(&signals, base, cfg.exec)?;
    if let Some(stats) = &forward.stats {
        params.update_running(stats, 1.0);
    }
    Ok(())
}

pub fn inference_recon(
    surfaces: &[BSplineSurface],
    base: &BaseShape,
    layout: &SensorLayout,
    params: &PredictorParams,
    cfg: &LossConfig,
    exec: Exec,
) -> Result<f64> {
    if surfaces.is_empty() {
        return Ok(f64::NAN);
    }
    let signals = masked_signals(surfaces, layout, cfg.samples, exec)?;
    let inference = params.clone().with_mode(Mode::Inference);
    let fwd = inference.forward_with(&signals, base, exec)?;
    loss_recon(&fwd.predictions, surfaces)
}

/// Reflects follower gradients of mirrored pairs into their leaders.
fn tie_mirrored(g: &mut GradientBundle) {
    for k in (0..g.d_layout.len() / 2).map(|p| 2 * p) {
        let f = std::mem::replace(&mut g.d_layout[k + 1], [0.0; 4]);
        let lead = &mut g.d_layout[k];
        lead[0] -= f[0];
        lead[1] += f[1];
        lead[2] -= f[2];
        lead[3] += f[3];
        g.d_logits[k] += std::mem::replace(&mut g.d_logits[k + 1], 0.0);
    }
}

fn pack(layout: &SensorLayout, params: &PredictorParams) -> Vec<f64> {
    layout
        .sensors
        .iter()
        .flat_map(|s| s.to_array())
        .chain(layout.logits.iter().copied())
        .chain(params.theta.iter().copied())
        .collect()
}

fn unpack(x: &[f64], layout: &mut SensorLayout, params: &mut PredictorParams) {
    let m = layout.len();
    for (k, s) in layout.sensors.iter_mut().enumerate() {
        let c = &x[4 * k..4 * k + 4];
        s.u_s = c[0];
        s.v_s = c[1];
        s.u_e = c[2];
        s.v_e = c[3];
    }
    layout.logits.copy_from_slice(&x[4 * m..5 * m]);
    params.theta.copy_from_slice(&x[5 * m..]);
}

/// Splits `order` into batches of `size`; a trailing batch of one is merged
/// into its predecessor since training-mode batch norm needs two samples.
fn batches(order: &[usize], size: usize) -> Vec<&[usize]> {
    let mut out: Vec<&[usize]> = order.chunks(size).collect();
    if out.len() > 1 && out.last().is_some_and(|b| b.len() == 1) {
        out.pop();
        let start = (out.len() - 1) * size;
        let last = out.len() - 1;
        out[last] = &order[start..];
    }
    out
}

/// Per-epoch hook: receives the epoch row, the layout and the parameters
/// after that epoch (epoch 0 is the initial state).
pub type EpochHook<'a> = dyn FnMut(&EpochRow, &SensorLayout, &PredictorParams) -> Result<()> + 'a;

/// Co-optimizes layout and predictor with fresh predictor parameters seeded
/// from `cfg.seed`.
pub fn co_optimize(
    train: &ShapeDataset,
    test: &ShapeDataset,
    init_layout: &SensorLayout,
    cfg: &TrainConfig,
) -> Result<TrainReport> {
    let params = PredictorParams::init(init_layout.len(), train.m(), train.n(), cfg.seed)?;
    co_optimize_from(train, test, init_layout, params, cfg, &mut |_, _, _| Ok(()))
}

pub fn co_optimize_from(
    train: &ShapeDataset,
    test: &ShapeDataset,
    init_layout: &SensorLayout,
    init_params: PredictorParams,
    cfg: &TrainConfig,
    on_epoch: &mut EpochHook<'_>,
) -> Result<TrainReport> {
    let started = Instant::now();
    cfg.validate()?;
    init_layout.validate()?;
    cfg.constraint_mode.check_count(init_layout.len())?;
    if train.is_empty() {
        return Err(Error::invalid("training set is empty"));
    }
    if train.len() < 2 {
        return Err(Error::invalid("training set needs at least two shapes"));
    }
    if !test.base.same_schema(&train.base) {
        return Err(Error::invalid("train and test sets have different schemas"));
    }
    let dims = init_params.dims();
    if dims.inputs != init_layout.len() || dims.m != train.m() || dims.n != train.n() {
        return Err(Error::invalid(format!(
            "predictor is {}->{}x{} but the run has {} sensors on a {}x{} grid",
            dims.inputs,
            dims.m,
            dims.n,
            init_layout.len(),
            train.m(),
            train.n()
        )));
    }
    let exec = cfg.exec;
    let base = &train.base;
    let base_surface = train.base_surface()?;
    let train_surfaces = train.surfaces()?;
    let test_surfaces = test.surfaces()?;

    let mut layout = init_layout.clone();
    let mut params = init_params.with_mode(Mode::Training);
    let m = layout.len();

    let epoch_row = |epoch: usize, layout: &SensorLayout, params: &PredictorParams| {
        let d = layout_diagnostics(&base_surface, layout, cfg.loss.samples)?;
        Ok::<_, Error>(EpochRow {
            epoch,
            active_count: d.active_count,
            intersections: d.intersections,
            min_distance_mm: d.min_distance_mm,
            min_length_mm: d.min_length_mm,
            overlap: layout_overlap(layout),
            test_recon: inference_recon(&test_surfaces, base, layout, params, &cfg.loss, exec)?,
        })
    };

    let mut steps = Vec::new();
    let first = epoch_row(0, &layout, &params)?;
    on_epoch(&first, &layout, &params)?;
    let mut epochs = vec![first];
    let mut epoch_layouts = vec![layout.clone()];

    let mut adam = AdamState::new(5 * m + params.param_count());
    let mut shuffle = substream(cfg.seed, Stream::Shuffle);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut noise = substream(cfg.seed, Stream::Noise);
    let mut step = 0usize;

    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut shuffle);
        for batch in batches(&order, cfg.batch_size) {
            let good = Checkpoint {
                epoch,
                step,
                layout: layout.clone(),
                params: params.clone(),
            };
            let abort = |reason: String, good: Checkpoint| Error::NumericAbort {
                step: step + 1,
                reason,
                checkpoint: Box::new(good),
            };
            let truths: Vec<&BSplineSurface> = batch.iter().map(|&i| &train_surfaces[i]).collect();
            let eps = draw_noise(&mut noise, truths.len(), m, cfg.signal_noise_mm);
            let state =
                forward_total_with_noise(&truths, base, &layout, &params, &cfg.loss, &eps, exec)?;
            if !state.breakdown.total.is_finite() {
                return Err(abort(
                    format!("non-finite loss {:?}", state.breakdown),
                    good,
                ));
            }
            let mut g = backward_total(&state, &layout, &params)?;
            if cfg.freeze_layout {
                g.d_layout.iter_mut().for_each(|c| *c = [0.0; 4]);
                g.d_logits.fill(0.0);
            } else if cfg.constraint_mode == ConstraintMode::MirroredPairs {
                tie_mirrored(&mut g);
            }
            let grads: Vec<f64> = g
                .layout_flat()
                .into_iter()
                .chain(g.d_predictor.iter().copied())
                .collect();
            let mut x = pack(&layout, &params);
            if let Err(e) = adam_step(&mut adam, &mut x, &grads, cfg.learning_rate) {
                return Err(abort(e.to_string(), good));
            }
            if x.iter().any(|v| !v.is_finite()) {
                return Err(abort("parameters became non-finite".into(), good));
            }
            unpack(&x, &mut layout, &mut params);
            if let Some(stats) = &state.batch_stats {
                params.update_running(stats, BN_MOMENTUM);
            }
            if !cfg.freeze_layout {
                project_in_place(&mut layout, cfg.constraint_mode);
            }
            step += 1;
            steps.push(StepRow {
                step,
                epoch,
                loss: state.breakdown,
                active_count: active_sensors(&layout, ACTIVE_THRESHOLD).len(),
            });
        }
        recalibrate(&mut params, &train_surfaces, base, &layout, cfg, &mut noise)?;
        let row = epoch_row(epoch, &layout, &params)?;
        on_epoch(&row, &layout, &params)?;
        epochs.push(row);
        epoch_layouts.push(layout.clone());
    }

    Ok(TrainReport {
        steps,
        epochs,
        epoch_layouts,
        final_layout: layout,
        final_params: params,
        wall_time_s: started.elapsed().as_secs_f64(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalMetrics {
    pub per_shape_avg_mm: Vec<f64>,
    pub per_shape_max_mm: Vec<f64>,
    pub max_of_avg_mm: f64,
    pub mean_of_avg_mm: f64,
}

impl EvalMetrics {
    fn from_rows(rows: Vec<(f64, f64)>) -> Self {
        let (avg, max): (Vec<f64>, Vec<f64>) = rows.into_iter().unzip();
        let max_of_avg_mm = avg.iter().copied().fold(0.0, f64::max);
        let mean_of_avg_mm = if avg.is_empty() {
            0.0
        } else {
            avg.iter().sum::<f64>() / avg.len() as f64
        };
        EvalMetrics {
            per_shape_avg_mm: avg,
            per_shape_max_mm: max,
            max_of_avg_mm,
            mean_of_avg_mm,
        }
    }

    pub fn per_shape_csv(&self) -> String {
        let mut out = String::from("shape,avg_mm,max_mm\n");
        for (k, (a, m)) in self
            .per_shape_avg_mm
            .iter()
            .zip(&self.per_shape_max_mm)
            .enumerate()
        {
            let _ = writeln!(out, "{k},{},{}", fmt_f(*a), fmt_f(*m));
        }
        out
    }
}

/// Average and maximum distance between two surfaces over a `grid x grid`
/// UV lattice including the borders.
pub fn surface_distance(a: &BSplineSurface, b: &BSplineSurface, grid: usize) -> Result<(f64, f64)> {
    if grid < 2 {
        return Err(Error::invalid("evaluation grid must be at least 2"));
    }
    let step = 1.0 / (grid - 1) as f64;
    let (mut sum, mut max) = (0.0, 0.0f64);
    for i in 0..grid {
        let u = if i == grid - 1 { 1.0 } else { i as f64 * step };
        for j in 0..grid {
            let v = if j == grid - 1 { 1.0 } else { j as f64 * step };
            let d = (a.point(u, v)? - b.point(u, v)?).norm();
            sum += d;
            max = max.max(d);
        }
    }
    Ok((sum / (grid * grid) as f64, max))
}

/// Surface-distance metrics of the predictor on `test` with inference-mode
/// batch norm.
pub fn evaluate(
    layout: &SensorLayout,
    params: &PredictorParams,
    base: &BaseShape,
    test: &ShapeDataset,
    grid: usize,
    samples: usize,
    exec: Exec,
) -> Result<EvalMetrics> {
    if grid < 2 {
        return Err(Error::invalid("evaluation grid must be at least 2"));
    }
    let dims = params.dims();
    if !test.base.same_schema(base) || dims.m != base.m || dims.n != base.n {
        return Err(Error::invalid(format!(
            "schema mismatch: dataset {}x{}, base {}x{}, predictor {}x{}",
            test.m(),
            test.n(),
            base.m,
            base.n,
            dims.m,
            dims.n
        )));
    }
    if dims.inputs != layout.len() {
        return Err(Error::invalid(format!(
            "schema mismatch: predictor takes {} signals, layout has {} sensors",
            dims.inputs,
            layout.len()
        )));
    }
    if test.is_empty() {
        return Ok(EvalMetrics::from_rows(Vec::new()));
    }
    let truths = test.surfaces()?;
    let signals = masked_signals(&truths, layout, samples, exec)?;
    let inference = params.clone().with_mode(Mode::Inference);
    let predictions = inference.forward_with(&signals, base, exec)?.predictions;
    let rows = exec.try_map(truths.len(), |k| {
        let pred = BSplineSurface::new(predictions[k].clone())?;
        surface_distance(&pred, &truths[k], grid)
    })?;
    Ok(EvalMetrics::from_rows(rows))
}
