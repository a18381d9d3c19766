//! Exact gradients of the total loss with respect to the sensor layout
//! `(L, b)` and the predictor parameters.
//!
//! Sensor-length gradients are propagated analytically through the chord
//! samples: each sample's UV position is a linear blend of the endpoints, and
//! the surface partials at the sample carry the chord-direction gradient back
//! to UV. Everything downstream of the signals (batch norm, MLP,
//! reconstruction error) goes through [`PredictorParams::backward`].

use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::geometry::{BSplineSurface, ControlGrid, SurfaceSample, Vec3};
use crate::layout::{occupancy_derivative, regularized_norm, sensor_samples, Sensor, SensorLayout};
use crate::losses::{
    min_length_penalty, min_space_penalty, orient, overlap_terms, sensor_pairs, LossBreakdown,
    LossConfig,
};
use crate::predictor::{BaseShape, BatchStats, ForwardCache, PredictorParams};

/// Gradient of a scalar with respect to `(L, b, theta_p)`.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientBundle {
    pub d_layout: Vec<[f64; 4]>,
    pub d_logits: Vec<f64>,
    pub d_predictor: Vec<f64>,
}

impl GradientBundle {
    pub fn zeros(sensors: usize, params: usize) -> Self {
        GradientBundle {
            d_layout: vec![[0.0; 4]; sensors],
            d_logits: vec![0.0; sensors],
            d_predictor: vec![0.0; params],
        }
    }

    pub fn is_finite(&self) -> bool {
        self.d_layout.iter().flatten().all(|x| x.is_finite())
            && self.d_logits.iter().all(|x| x.is_finite())
            && self.d_predictor.iter().all(|x| x.is_finite())
    }

    /// Layout and logit gradients flattened as `[L row-major..., b...]`.
    pub fn layout_flat(&self) -> Vec<f64> {
        self.d_layout
            .iter()
            .flatten()
            .chain(&self.d_logits)
            .copied()
            .collect()
    }
}

/// Weights of a sample with respect to the start and end points.
fn blend_weights(t: usize, samples: usize) -> (f64, f64) {
    let w = t as f64 / (samples - 1) as f64;
    (1.0 - w, w)
}

/// Pulls per-sample gradients with respect to surface points back to the
/// sensor's four endpoint coordinates.
fn chain_to_endpoints(samples: &[SurfaceSample], point_grads: &[Vec3]) -> [f64; 4] {
    let k = samples.len();
    let mut g = [0.0; 4];
    for (t, (s, dp)) in samples.iter().zip(point_grads).enumerate() {
        let du = dp.dot(s.du);
        let dv = dp.dot(s.dv);
        let (ws, we) = blend_weights(t, k);
        g[0] += ws * du;
        g[1] += ws * dv;
        g[2] += we * du;
        g[3] += we * dv;
    }
    g
}

fn length_and_grad_from_samples(samples: &[SurfaceSample]) -> (f64, [f64; 4]) {
    let k = samples.len();
    let mut length = 0.0;
    let mut point_grads = vec![Vec3::ZERO; k];
    for t in 1..k {
        let chord = samples[t].point - samples[t - 1].point;
        let norm = regularized_norm(chord);
        length += norm;
        let dir = chord * (1.0 / norm);
        point_grads[t] += dir;
        point_grads[t - 1] += -dir;
    }
    (length, chain_to_endpoints(samples, &point_grads))
}

/// Sensor length and its gradient with respect to `(u_s, v_s, u_e, v_e)`.
pub fn sensor_length_and_grad(
    surface: &BSplineSurface,
    sensor: &Sensor,
    samples: usize,
) -> Result<(f64, [f64; 4])> {
    let s = sensor_samples(surface, sensor, samples)?;
    Ok(length_and_grad_from_samples(&s))
}

pub fn grad_sensor_length(
    surface: &BSplineSurface,
    sensor: &Sensor,
    samples: usize,
) -> Result<[f64; 4]> {
    Ok(sensor_length_and_grad(surface, sensor, samples)?.1)
}

/// Partials of `orient(a, b, p)` with respect to `a`, `b`, `p`.
fn orient_grad(a: (f64, f64), b: (f64, f64), p: (f64, f64)) -> [[f64; 2]; 3] {
    [
        [b.1 - p.1, p.0 - b.0],
        [p.1 - a.1, a.0 - p.0],
        [a.1 - b.1, b.0 - a.0],
    ]
}

/// Overlap loss of a pair and its gradients with respect to each sensor.
pub fn overlap_and_grad(s1: &Sensor, s2: &Sensor, alpha: f64) -> (f64, [f64; 4], [f64; 4]) {
    let (a, b) = ((s1.u_s, s1.v_s), (s1.u_e, s1.v_e));
    let (c, d) = ((s2.u_s, s2.v_s), (s2.u_e, s2.v_e));
    let (f1, f2) = overlap_terms(s1, s2);
    let t1 = (alpha * f1).tanh();
    let t2 = (alpha * f2).tanh();
    let value = 0.25 * (1.0 + t1) * (1.0 + t2);
    let d_f1 = 0.25 * alpha * (1.0 - t1 * t1) * (1.0 + t2);
    let d_f2 = 0.25 * alpha * (1.0 - t2 * t2) * (1.0 + t1);

    // points in order a, b, c, d
    let mut g = [[0.0f64; 2]; 4];
    // f1 = -orient(c, d, a) * orient(c, d, b)
    let (oa, ob) = (orient(c, d, a), orient(c, d, b));
    let ga = orient_grad(c, d, a);
    let gb = orient_grad(c, d, b);
    for x in 0..2 {
        g[0][x] += d_f1 * -ob * ga[2][x];
        g[1][x] += d_f1 * -oa * gb[2][x];
        g[2][x] += d_f1 * -(ga[0][x] * ob + oa * gb[0][x]);
        g[3][x] += d_f1 * -(ga[1][x] * ob + oa * gb[1][x]);
    }
    // f2 = -orient(a, b, c) * orient(a, b, d)
    let (oc, od) = (orient(a, b, c), orient(a, b, d));
    let gc = orient_grad(a, b, c);
    let gd = orient_grad(a, b, d);
    for x in 0..2 {
        g[2][x] += d_f2 * -od * gc[2][x];
        g[3][x] += d_f2 * -oc * gd[2][x];
        g[0][x] += d_f2 * -(gc[0][x] * od + oc * gd[0][x]);
        g[1][x] += d_f2 * -(gc[1][x] * od + oc * gd[1][x]);
    }
    (
        value,
        [g[0][0], g[0][1], g[1][0], g[1][1]],
        [g[2][0], g[2][1], g[3][0], g[3][1]],
    )
}

/// Soft-min distance between two sampled sensors and its gradients with
/// respect to each sensor's endpoints.
pub(crate) fn soft_min_and_grad(
    a: &[SurfaceSample],
    b: &[SurfaceSample],
    beta: f64,
) -> (f64, [f64; 4], [f64; 4]) {
    let kb = b.len();
    let mut dists = Vec::with_capacity(a.len() * kb);
    for p in a {
        for q in b {
            dists.push(regularized_norm(p.point - q.point));
        }
    }
    let min = dists.iter().copied().fold(f64::INFINITY, f64::min);
    let weights: Vec<f64> = dists.iter().map(|d| (-beta * (d - min)).exp()).collect();
    let sum: f64 = weights.iter().sum();
    let value = min - sum.ln() / beta;

    let mut ga = vec![Vec3::ZERO; a.len()];
    let mut gb = vec![Vec3::ZERO; kb];
    for (i, p) in a.iter().enumerate() {
        for (j, q) in b.iter().enumerate() {
            let idx = i * kb + j;
            let w = weights[idx] / sum;
            if w == 0.0 {
                continue;
            }
            let dir = (p.point - q.point) * (w / dists[idx]);
            ga[i] += dir;
            gb[j] += -dir;
        }
    }
    (
        value,
        chain_to_endpoints(a, &ga),
        chain_to_endpoints(b, &gb),
    )
}

/// Gradient of one scalar term with respect to the layout.
#[derive(Debug, Clone, PartialEq)]
pub struct LayoutGrad {
    pub sensors: Vec<[f64; 4]>,
    pub logits: Vec<f64>,
}

impl LayoutGrad {
    fn zeros(m: usize) -> Self {
        LayoutGrad {
            sensors: vec![[0.0; 4]; m],
            logits: vec![0.0; m],
        }
    }

    pub fn flat(&self) -> Vec<f64> {
        self.sensors
            .iter()
            .flatten()
            .chain(&self.logits)
            .copied()
            .collect()
    }
}

/// Values and layout gradients of the four geometry terms on one surface.
/// `overlap` and `min_space` are occupancy-weighted pair sums.
#[derive(Debug, Clone, PartialEq)]
pub struct GeometryGrads {
    pub total_length: (f64, LayoutGrad),
    pub min_length: (f64, LayoutGrad),
    pub overlap: (f64, LayoutGrad),
    pub min_space: (f64, LayoutGrad),
}

fn add4(dst: &mut [f64; 4], src: &[f64; 4], scale: f64) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += scale * s;
    }
}

pub fn geometry_gradients(
    surface: &BSplineSurface,
    layout: &SensorLayout,
    cfg: &LossConfig,
    exec: Exec,
) -> Result<GeometryGrads> {
    let count = layout.len();
    let occ = layout.occupancy();
    let docc: Vec<f64> = layout
        .logits
        .iter()
        .map(|&b| occupancy_derivative(b, layout.alpha))
        .collect();
    let samples = exec.try_map(count, |k| {
        sensor_samples(surface, &layout.sensors[k], cfg.samples)
    })?;

    let mut total_length = (0.0, LayoutGrad::zeros(count));
    let mut min_length = (0.0, LayoutGrad::zeros(count));
    for k in 0..count {
        let (l, dl) = length_and_grad_from_samples(&samples[k]);
        total_length.0 += occ[k] * l;
        add4(&mut total_length.1.sensors[k], &dl, occ[k]);
        total_length.1.logits[k] += docc[k] * l;

        let pen = min_length_penalty(l, cfg.l_min);
        min_length.0 += occ[k] * pen;
        if pen > 0.0 {
            let dpen = -2.0 * (cfg.l_min - l);
            add4(&mut min_length.1.sensors[k], &dl, occ[k] * dpen);
            min_length.1.logits[k] += docc[k] * pen;
        }
    }

    let pairs = sensor_pairs(count);
    let per_pair = exec.map(pairs.len(), |p| {
        let (i, j) = pairs[p];
        let overlap = overlap_and_grad(&layout.sensors[i], &layout.sensors[j], layout.alpha);
        let space = soft_min_and_grad(&samples[i], &samples[j], cfg.beta);
        (overlap, space)
    });

    let mut overlap = (0.0, LayoutGrad::zeros(count));
    let mut min_space = (0.0, LayoutGrad::zeros(count));
    for (&(i, j), ((o, oi, oj), (d, di, dj))) in pairs.iter().zip(&per_pair) {
        let w = occ[i] * occ[j];
        overlap.0 += w * o;
        add4(&mut overlap.1.sensors[i], oi, w);
        add4(&mut overlap.1.sensors[j], oj, w);
        overlap.1.logits[i] += docc[i] * occ[j] * o;
        overlap.1.logits[j] += occ[i] * docc[j] * o;

        let pen = min_space_penalty(*d, cfg.tau);
        min_space.0 += w * pen;
        if pen > 0.0 {
            let dpen = -2.0 * (cfg.tau - d);
            add4(&mut min_space.1.sensors[i], di, w * dpen);
            add4(&mut min_space.1.sensors[j], dj, w * dpen);
            min_space.1.logits[i] += docc[i] * occ[j] * pen;
            min_space.1.logits[j] += occ[i] * docc[j] * pen;
        }
    }
    Ok(GeometryGrads {
        total_length,
        min_length,
        overlap,
        min_space,
    })
}

/// Recorded forward evaluation of the total loss, consumed by
/// [`backward_total`].
#[derive(Debug, Clone)]
pub struct ForwardState {
    pub breakdown: LossBreakdown,
    pub predictions: Vec<ControlGrid>,
    /// Training-mode batch statistics for the running-average update.
    pub batch_stats: Option<BatchStats>,
    /// Raw sensor lengths per batch shape.
    pub lengths: Vec<Vec<f64>>,
    cfg: LossConfig,
    sensors: usize,
    params: usize,
    occupancy: Vec<f64>,
    occupancy_deriv: Vec<f64>,
    length_grads: Vec<Vec<[f64; 4]>>,
    residuals: Vec<Vec<Vec3>>,
    cache: ForwardCache,
    geometry: GeometryGrads,
}

impl ForwardState {
    pub fn cache(&self) -> &ForwardCache {
        &self.cache
    }
}

/// Runs the full forward pass: signals on every truth surface, predictor,
/// reconstruction error, and geometry terms on the first truth surface.
pub fn forward_total(
    truths: &[&BSplineSurface],
    base: &BaseShape,
    layout: &SensorLayout,
    params: &PredictorParams,
    cfg: &LossConfig,
    exec: Exec,
) -> Result<ForwardState> {
    forward_total_with_noise(
        truths,
        base,
        layout,
        params,
        cfg,
        &SignalNoise::default(),
        exec,
    )
}

/// Additive measurement noise (mm) on the signals of one batch: entry
/// `[s][k]` is added to signal `k` of truth `s`. An empty table means none.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct SignalNoise {
    pub offset: Vec<Vec<f64>>,
}

impl SignalNoise {
    pub fn is_empty(&self) -> bool {
        self.offset.is_empty()
    }

    fn check(&self, rows: usize, cols: usize) -> Result<()> {
        if !self.offset.is_empty()
            && (self.offset.len() != rows || self.offset.iter().any(|r| r.len() != cols))
        {
            return Err(Error::invalid(
                "noise needs one row per truth and one entry per sensor",
            ));
        }
        Ok(())
    }

    pub fn apply(&self, mut signals: Vec<Vec<f64>>) -> Vec<Vec<f64>> {
        for (row, eps) in signals.iter_mut().zip(&self.offset) {
            row.iter_mut().zip(eps).for_each(|(x, e)| *x += e);
        }
        signals
    }
}

/// As [`forward_total`], with measurement noise on the signals.
pub fn forward_total_with_noise(
    truths: &[&BSplineSurface],
    base: &BaseShape,
    layout: &SensorLayout,
    params: &PredictorParams,
    cfg: &LossConfig,
    noise: &SignalNoise,
    exec: Exec,
) -> Result<ForwardState> {
    cfg.validate()?;
    layout.validate()?;
    let anchor = *truths
        .first()
        .ok_or_else(|| Error::invalid("loss needs a nonempty batch"))?;
    if params.dims().inputs != layout.len() {
        return Err(Error::invalid(format!(
            "predictor takes {} signals but the layout has {} sensors",
            params.dims().inputs,
            layout.len()
        )));
    }
    let occupancy = layout.occupancy();
    let occupancy_deriv: Vec<f64> = layout
        .logits
        .iter()
        .map(|&b| occupancy_derivative(b, layout.alpha))
        .collect();

    let per_shape = exec.try_map(truths.len(), |s| -> Result<Vec<(f64, [f64; 4])>> {
        layout
            .sensors
            .iter()
            .map(|sensor| sensor_length_and_grad(truths[s], sensor, cfg.samples))
            .collect()
    })?;
    let lengths: Vec<Vec<f64>> = per_shape
        .iter()
        .map(|row| row.iter().map(|x| x.0).collect())
        .collect();
    let length_grads: Vec<Vec<[f64; 4]>> = per_shape
        .iter()
        .map(|row| row.iter().map(|x| x.1).collect())
        .collect();
    let signals: Vec<Vec<f64>> = lengths
        .iter()
        .map(|row| row.iter().zip(&occupancy).map(|(l, h)| h * l).collect())
        .collect();
    noise.check(truths.len(), layout.len())?;
    let signals = noise.apply(signals);

    let forward = params.forward_with(&signals, base, exec)?;
    let mut residuals = Vec::with_capacity(truths.len());
    let mut sq = 0.0;
    for (pred, truth) in forward.predictions.iter().zip(truths) {
        if !pred.same_schema(truth.grid()) {
            return Err(Error::invalid(
                "truth surface does not match the base shape",
            ));
        }
        let r: Vec<Vec3> = pred
            .points
            .iter()
            .zip(&truth.grid().points)
            .map(|(p, t)| *p - *t)
            .collect();
        sq += r.iter().map(|d| d.norm_squared()).sum::<f64>();
        residuals.push(r);
    }
    let recon = sq / (base.m * base.n * truths.len()) as f64;

    let geometry = geometry_gradients(anchor, layout, cfg, exec)?;
    let mut breakdown = LossBreakdown {
        recon,
        total_length: geometry.total_length.0,
        min_length: geometry.min_length.0,
        overlap: geometry.overlap.0,
        min_space: geometry.min_space.0,
        total: 0.0,
    };
    breakdown.total = breakdown.recombine(cfg);

    Ok(ForwardState {
        breakdown,
        predictions: forward.predictions,
        batch_stats: forward.stats,
        lengths,
        cfg: *cfg,
        sensors: layout.len(),
        params: params.param_count(),
        occupancy,
        occupancy_deriv,
        length_grads,
        residuals,
        cache: forward.cache,
        geometry,
    })
}

/// Gradient of `state.breakdown.total` with respect to the layout and the
/// predictor parameters the state was evaluated with.
pub fn backward_total(
    state: &ForwardState,
    layout: &SensorLayout,
    params: &PredictorParams,
) -> Result<GradientBundle> {
    if state.sensors != layout.len() || state.params != params.param_count() {
        return Err(Error::InvalidState(format!(
            "forward state was recorded for {} sensors and {} parameters, got {} and {}",
            state.sensors,
            state.params,
            layout.len(),
            params.param_count()
        )));
    }
    let cfg = &state.cfg;
    let batch = state.residuals.len();
    let points = state.residuals.first().map_or(0, Vec::len);
    let scale = 2.0 / (points * batch) as f64;
    let upstream: Vec<f64> = state
        .residuals
        .iter()
        .flatten()
        .flat_map(|r| [r.x * scale, r.y * scale, r.z * scale])
        .collect();
    let pg = params.backward(&state.cache, &upstream)?;

    let m = state.sensors;
    let mut out = GradientBundle::zeros(m, params.param_count());
    out.d_predictor = pg.params;

    // signal s_k = h_k * l_k (+ noise) on each shape
    for b in 0..batch {
        for k in 0..m {
            let ds = pg.inputs[b * m + k];
            add4(
                &mut out.d_layout[k],
                &state.length_grads[b][k],
                ds * state.occupancy[k],
            );
            out.d_logits[k] += ds * state.lengths[b][k] * state.occupancy_deriv[k];
        }
    }

    let g = &state.geometry;
    for (weight, term) in [
        (cfg.w_t, &g.total_length.1),
        (cfg.w_m, &g.min_length.1),
        (cfg.w_p, &g.overlap.1),
        (cfg.w_s, &g.min_space.1),
    ] {
        if weight == 0.0 {
            continue;
        }
        for k in 0..m {
            add4(&mut out.d_layout[k], &term.sensors[k], weight);
            out.d_logits[k] += weight * term.logits[k];
        }
    }
    Ok(out)
}

/// Central-difference gradients of every output of `f` at `x`, refined by
/// one Richardson step: `(4 D(h/2) - D(h)) / 3`. Returns one gradient per
/// output.
pub fn finite_difference_gradients<F>(mut f: F, x: &[f64], h: f64) -> Result<Vec<Vec<f64>>>
where
    F: FnMut(&[f64]) -> Vec<f64>,
{
    if !(h > 0.0) {
        return Err(Error::invalid("step must be positive"));
    }
    let mut probe = x.to_vec();
    let mut out: Vec<Vec<f64>> = Vec::new();
    for i in 0..x.len() {
        let mut diff = |step: f64| -> Result<Vec<f64>> {
            probe[i] = x[i] + step;
            let up = f(&probe);
            probe[i] = x[i] - step;
            let down = f(&probe);
            probe[i] = x[i];
            if up.len() != down.len() || up.iter().chain(&down).any(|v| !v.is_finite()) {
                return Err(Error::Numeric(format!(
                    "non-finite function value while differencing coordinate {i}"
                )));
            }
            Ok(up
                .iter()
                .zip(&down)
                .map(|(a, b)| (a - b) / (2.0 * step))
                .collect())
        };
        let coarse = diff(h)?;
        let fine = diff(0.5 * h)?;
        if out.is_empty() {
            out = vec![Vec::with_capacity(x.len()); coarse.len()];
        }
        for (o, (c, f)) in out.iter_mut().zip(coarse.iter().zip(&fine)) {
            o.push((4.0 * f - c) / 3.0);
        }
    }
    Ok(out)
}

/// `max_i |a_i - fd_i| / max(|a_i|, |fd_i|, floor)` where the floor is
/// `1e-3 * max_j |a_j|` (at least 1e-8), so entries far below the gradient's
/// own scale are judged against it rather than against difference noise.
pub fn max_relative_error(analytic: &[f64], fd: &[f64]) -> Result<f64> {
    if analytic.len() != fd.len() {
        return Err(Error::invalid(format!(
            "{} gradient entries but {} differences",
            analytic.len(),
            fd.len()
        )));
    }
    let scale = analytic.iter().fold(0.0f64, |m, a| m.max(a.abs()));
    let floor = (1e-3 * scale).max(1e-8);
    Ok(analytic
        .iter()
        .zip(fd)
        .map(|(a, d)| (a - d).abs() / a.abs().max(d.abs()).max(floor))
        .fold(0.0, f64::max))
}

/// Largest relative disagreement between `analytic` and finite differences
/// of `f` around `x`, as measured by [`max_relative_error`].
pub fn finite_difference_check<F>(mut f: F, x: &[f64], analytic: &[f64], h: f64) -> Result<f64>
where
    F: FnMut(&[f64]) -> f64,
{
    if x.len() != analytic.len() {
        return Err(Error::invalid(format!(
            "{} coordinates but {} gradient entries",
            x.len(),
            analytic.len()
        )));
    }
    let fd = finite_difference_gradients(|p| vec![f(p)], x, h)?;
    max_relative_error(analytic, &fd[0])
}

/// Value of the weighted total for a layout and parameters; convenience for
/// difference checks.
pub fn total_value(
    truths: &[&BSplineSurface],
    base: &BaseShape,
    layout: &SensorLayout,
    params: &PredictorParams,
    cfg: &LossConfig,
) -> Result<f64> {
    Ok(
        forward_total(truths, base, layout, params, cfg, Exec::Sequential)?
            .breakdown
            .total,
    )
}
