//! Shape predictor: an MLP from masked sensor signals to control-point
//! offsets relative to the rest shape.
//!
//! Architecture: `M -> 36 -> 36 -> 36 -> 3mn`, each hidden layer computed as
//! linear, batch norm, ReLU. The output layer is linear. All trainable values
//! live in one flat vector so optimizers and gradient checks can treat them
//! uniformly; [`Slots`] maps tensors to ranges of it.
//!
//! In training mode the batch mean is subtracted from `x W^T` before the bias
//! is added back into the running mean, so the hidden biases have no effect on
//! training-mode outputs and their gradients are exactly zero.

use std::ops::Range;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::geometry::{ControlGrid, Vec3};
use crate::rng::{substream, Stream};

pub const HIDDEN_WIDTH: usize = 36;
pub const HIDDEN_LAYERS: usize = 3;
pub const BN_MOMENTUM: f64 = 0.1;
pub const BN_EPS: f64 = 1e-5;
pub const FORMAT_VERSION: u64 = 1;

/// The undeformed control grid that predictions are offsets from.
pub type BaseShape = ControlGrid;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    #[default]
    Training,
    Inference,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Dims {
    pub inputs: usize,
    pub m: usize,
    pub n: usize,
}

impl Dims {
    pub fn outputs(&self) -> usize {
        3 * self.m * self.n
    }

    /// Input and output widths of the four linear layers.
    fn layer_shapes(&self) -> [(usize, usize); HIDDEN_LAYERS + 1] {
        [
            (self.inputs, HIDDEN_WIDTH),
            (HIDDEN_WIDTH, HIDDEN_WIDTH),
            (HIDDEN_WIDTH, HIDDEN_WIDTH),
            (HIDDEN_WIDTH, self.outputs()),
        ]
    }
}

/// Ranges of each tensor inside the flat parameter vector.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Slots {
    pub weights: [Range<usize>; HIDDEN_LAYERS + 1],
    pub biases: [Range<usize>; HIDDEN_LAYERS + 1],
    pub gamma: [Range<usize>; HIDDEN_LAYERS],
    pub beta: [Range<usize>; HIDDEN_LAYERS],
    pub len: usize,
}

impl Slots {
    fn new(dims: &Dims) -> Self {
        let mut at = 0;
        let mut take = |k: usize| {
            let r = at..at + k;
            at += k;
            r
        };
        let shapes = dims.layer_shapes();
        let mut weights: [Range<usize>; 4] = Default::default();
        let mut biases: [Range<usize>; 4] = Default::default();
        let mut gamma: [Range<usize>; 3] = Default::default();
        let mut beta: [Range<usize>; 3] = Default::default();
        for (l, &(fan_in, fan_out)) in shapes.iter().enumerate() {
            weights[l] = take(fan_in * fan_out);
            biases[l] = take(fan_out);
            if l < HIDDEN_LAYERS {
                gamma[l] = take(fan_out);
                beta[l] = take(fan_out);
            }
        }
        Slots {
            weights,
            biases,
            gamma,
            beta,
            len: at,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PredictorParams {
    dims: Dims,
    slots: Slots,
    /// Trainable parameters.
    pub theta: Vec<f64>,
    pub running_mean: [Vec<f64>; HIDDEN_LAYERS],
    pub running_var: [Vec<f64>; HIDDEN_LAYERS],
    pub mode: Mode,
}

/// Per-layer batch statistics from one training-mode forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchStats {
    pub mean: [Vec<f64>; HIDDEN_LAYERS],
    pub var: [Vec<f64>; HIDDEN_LAYERS],
}

#[derive(Debug, Clone)]
struct HiddenCache {
    input: Vec<f64>,
    normalized: Vec<f64>,
    inv_std: Vec<f64>,
    pre_relu: Vec<f64>,
}

/// Intermediates recorded by [`PredictorParams::forward`] for the backward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    mode: Mode,
    batch: usize,
    hidden: Vec<HiddenCache>,
    last_hidden: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct Forward {
    pub predictions: Vec<ControlGrid>,
    pub cache: ForwardCache,
    /// Present in training mode.
    pub stats: Option<BatchStats>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PredictorGradients {
    /// Same layout as `theta`.
    pub params: Vec<f64>,
    /// Row-major `batch x inputs`.
    pub inputs: Vec<f64>,
}

/// `out[b, o] = sum_i x[b, i] * w[o, i]`, row-major throughout.
fn matmul_rows(
    x: &[f64],
    batch: usize,
    w: &[f64],
    fan_in: usize,
    fan_out: usize,
    exec: Exec,
) -> Vec<f64> {
    let rows = exec.map(batch, |b| {
        let xb = &x[b * fan_in..(b + 1) * fan_in];
        (0..fan_out)
            .map(|o| {
                let wo = &w[o * fan_in..(o + 1) * fan_in];
                xb.iter().zip(wo).map(|(a, c)| a * c).sum::<f64>()
            })
            .collect::<Vec<f64>>()
    });
    rows.concat()
}

impl PredictorParams {
    /// Seeded initialization: weights uniform in `±1/sqrt(fan_in)`, biases 0,
    /// batch-norm scale 1 and shift 0, running mean 0 and variance 1.
    pub fn init(inputs: usize, m: usize, n: usize, seed: u64) -> Result<Self> {
        let mut params = Self::zeroed(inputs, m, n)?;
        let mut rng = substream(seed, Stream::Predictor);
        for (l, &(fan_in, _)) in params.dims.layer_shapes().iter().enumerate() {
            let bound = 1.0 / (fan_in as f64).sqrt();
            for w in &mut params.theta[params.slots.weights[l].clone()] {
                *w = rng.gen_range(-bound..=bound);
            }
        }
        Ok(params)
    }

    /// All weights and biases zero; batch-norm at its initial state.
    pub fn zeroed(inputs: usize, m: usize, n: usize) -> Result<Self> {
        if inputs == 0 || m == 0 || n == 0 {
            return Err(Error::invalid("predictor dimensions must be positive"));
        }
        let dims = Dims { inputs, m, n };
        let slots = Slots::new(&dims);
        let mut theta = vec![0.0; slots.len];
        for g in &slots.gamma {
            theta[g.clone()].fill(1.0);
        }
        Ok(PredictorParams {
            dims,
            slots,
            theta,
            running_mean: std::array::from_fn(|_| vec![0.0; HIDDEN_WIDTH]),
            running_var: std::array::from_fn(|_| vec![1.0; HIDDEN_WIDTH]),
            mode: Mode::Training,
        })
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }

    pub fn slots(&self) -> &Slots {
        &self.slots
    }

    pub fn param_count(&self) -> usize {
        self.slots.len
    }

    pub fn with_mode(mut self, mode: Mode) -> Self {
        self.mode = mode;
        self
    }

    /// Blends batch statistics into the running estimates.
    pub fn update_running(&mut self, stats: &BatchStats, momentum: f64) {
        for l in 0..HIDDEN_LAYERS {
            for (r, &s) in self.running_mean[l].iter_mut().zip(&stats.mean[l]) {
                *r = (1.0 - momentum) * *r + momentum * s;
            }
            for (r, &s) in self.running_var[l].iter_mut().zip(&stats.var[l]) {
                *r = (1.0 - momentum) * *r + momentum * s;
            }
        }
    }

    fn check_batch<S: AsRef<[f64]>>(&self, signals: &[S], base: &BaseShape) -> Result<()> {
        if base.m != self.dims.m || base.n != self.dims.n {
            return Err(Error::invalid(format!(
                "base shape is {}x{} but predictor outputs {}x{}",
                base.m, base.n, self.dims.m, self.dims.n
            )));
        }
        if signals.is_empty() {
            return Err(Error::invalid("empty signal batch"));
        }
        if self.mode == Mode::Training && signals.len() < 2 {
            return Err(Error::invalid(
                "training-mode batch norm needs a batch of at least 2",
            ));
        }
        if let Some(bad) = signals
            .iter()
            .find(|s| s.as_ref().len() != self.dims.inputs)
        {
            return Err(Error::invalid(format!(
                "signal has {} entries, predictor expects {}",
                bad.as_ref().len(),
                self.dims.inputs
            )));
        }
        Ok(())
    }

    pub fn forward<S: AsRef<[f64]>>(&self, signals: &[S], base: &BaseShape) -> Result<Forward> {
        self.forward_with(signals, base, Exec::Sequential)
    }

    pub fn forward_with<S: AsRef<[f64]>>(
        &self,
        signals: &[S],
        base: &BaseShape,
        exec: Exec,
    ) -> Result<Forward> {
        self.check_batch(signals, base)?;
        let batch = signals.len();
        let training = self.mode == Mode::Training;
        let shapes = self.dims.layer_shapes();

        let mut x: Vec<f64> = signals
            .iter()
            .flat_map(|s| s.as_ref().iter().copied())
            .collect();
        let mut hidden = Vec::with_capacity(HIDDEN_LAYERS);
        let mut stats = BatchStats {
            mean: Default::default(),
            var: Default::default(),
        };

        for l in 0..HIDDEN_LAYERS {
            let (fan_in, width) = shapes[l];
            let w = &self.theta[self.slots.weights[l].clone()];
            let bias = &self.theta[self.slots.biases[l].clone()];
            let gamma = &self.theta[self.slots.gamma[l].clone()];
            let shift = &self.theta[self.slots.beta[l].clone()];
            let lin = matmul_rows(&x, batch, w, fan_in, width, Exec::Sequential);

            let mut normalized = vec![0.0; batch * width];
            let mut inv_std = vec![0.0; width];
            if training {
                let mut mean = vec![0.0; width];
                let mut var = vec![0.0; width];
                for o in 0..width {
                    let mu = (0..batch).map(|b| lin[b * width + o]).sum::<f64>() / batch as f64;
                    let v = (0..batch)
                        .map(|b| (lin[b * width + o] - mu).powi(2))
                        .sum::<f64>()
                        / batch as f64;
                    let is = 1.0 / (v + BN_EPS).sqrt();
                    for b in 0..batch {
                        normalized[b * width + o] = (lin[b * width + o] - mu) * is;
                    }
                    inv_std[o] = is;
                    mean[o] = mu + bias[o];
                    var[o] = v;
                }
                stats.mean[l] = mean;
                stats.var[l] = var;
            } else {
                for o in 0..width {
                    let is = 1.0 / (self.running_var[l][o] + BN_EPS).sqrt();
                    inv_std[o] = is;
                    for b in 0..batch {
                        normalized[b * width + o] =
                            (lin[b * width + o] + bias[o] - self.running_mean[l][o]) * is;
                    }
                }
            }
            let pre_relu: Vec<f64> = normalized
                .iter()
                .enumerate()
                .map(|(idx, &xh)| gamma[idx % width] * xh + shift[idx % width])
                .collect();
            let next: Vec<f64> = pre_relu.iter().map(|&y| y.max(0.0)).collect();
            hidden.push(HiddenCache {
                input: std::mem::replace(&mut x, next),
                normalized,
                inv_std,
                pre_relu,
            });
        }

        let (fan_in, outputs) = shapes[HIDDEN_LAYERS];
        let w = &self.theta[self.slots.weights[HIDDEN_LAYERS].clone()];
        let bias = &self.theta[self.slots.biases[HIDDEN_LAYERS].clone()];
        let out = matmul_rows(&x, batch, w, fan_in, outputs, exec);
        let predictions = (0..batch)
            .map(|b| {
                let row = &out[b * outputs..(b + 1) * outputs];
                let points = base
                    .points
                    .iter()
                    .enumerate()
                    .map(|(p, &bp)| {
                        let o = 3 * p;
                        bp + Vec3::new(
                            row[o] + bias[o],
                            row[o + 1] + bias[o + 1],
                            row[o + 2] + bias[o + 2],
                        )
                    })
                    .collect();
                ControlGrid {
                    m: base.m,
                    n: base.n,
                    points,
                }
            })
            .collect();

        Ok(Forward {
            predictions,
            cache: ForwardCache {
                mode: self.mode,
                batch,
                hidden,
                last_hidden: x,
            },
            stats: training.then_some(stats),
        })
    }

    /// Reverse pass of a training-mode forward. `upstream` holds
    /// d(loss)/d(prediction) as row-major `batch x 3mn` (x, y, z per point).
    pub fn backward(&self, cache: &ForwardCache, upstream: &[f64]) -> Result<PredictorGradients> {
        if cache.mode != Mode::Training {
            return Err(Error::InvalidState(
                "backward needs a training-mode forward pass".into(),
            ));
        }
        let batch = cache.batch;
        let shapes = self.dims.layer_shapes();
        let (fan_in, outputs) = shapes[HIDDEN_LAYERS];
        if upstream.len() != batch * outputs || cache.hidden.len() != HIDDEN_LAYERS {
            return Err(Error::InvalidState(format!(
                "upstream gradient has {} entries, expected {}",
                upstream.len(),
                batch * outputs
            )));
        }
        let mut grad = vec![0.0; self.slots.len];

        // output layer
        let w = &self.theta[self.slots.weights[HIDDEN_LAYERS].clone()];
        let a = &cache.last_hidden;
        let dw = &mut grad[self.slots.weights[HIDDEN_LAYERS].clone()];
        for b in 0..batch {
            let g = &upstream[b * outputs..(b + 1) * outputs];
            let ab = &a[b * fan_in..(b + 1) * fan_in];
            for (o, &go) in g.iter().enumerate() {
                if go != 0.0 {
                    for (dwi, &ai) in dw[o * fan_in..(o + 1) * fan_in].iter_mut().zip(ab) {
                        *dwi += go * ai;
                    }
                }
            }
        }
        let db = &mut grad[self.slots.biases[HIDDEN_LAYERS].clone()];
        for b in 0..batch {
            for (d, &g) in db.iter_mut().zip(&upstream[b * outputs..(b + 1) * outputs]) {
                *d += g;
            }
        }
        let mut da = vec![0.0; batch * fan_in];
        for b in 0..batch {
            let g = &upstream[b * outputs..(b + 1) * outputs];
            let dab = &mut da[b * fan_in..(b + 1) * fan_in];
            for (o, &go) in g.iter().enumerate() {
                if go != 0.0 {
                    for (d, &wi) in dab.iter_mut().zip(&w[o * fan_in..(o + 1) * fan_in]) {
                        *d += go * wi;
                    }
                }
            }
        }
        self.backward_hidden(cache, da, grad)
    }

    fn backward_hidden(
        &self,
        cache: &ForwardCache,
        mut da: Vec<f64>,
        mut grad: Vec<f64>,
    ) -> Result<PredictorGradients> {
        let batch = cache.batch;
        let bf = batch as f64;
        let shapes = self.dims.layer_shapes();
        for l in (0..HIDDEN_LAYERS).rev() {
            let (fan_in, width) = shapes[l];
            let c = &cache.hidden[l];
            let gamma = &self.theta[self.slots.gamma[l].clone()];

            let dy: Vec<f64> = da
                .iter()
                .zip(&c.pre_relu)
                .map(|(&d, &y)| if y > 0.0 { d } else { 0.0 })
                .collect();
            let mut dz = vec![0.0; batch * width];
            {
                let mut dgamma = vec![0.0; width];
                let mut dbeta = vec![0.0; width];
                for o in 0..width {
                    let (mut sum_d, mut sum_dx) = (0.0, 0.0);
                    for b in 0..batch {
                        let idx = b * width + o;
                        dgamma[o] += dy[idx] * c.normalized[idx];
                        dbeta[o] += dy[idx];
                        let dxh = dy[idx] * gamma[o];
                        sum_d += dxh;
                        sum_dx += dxh * c.normalized[idx];
                    }
                    for b in 0..batch {
                        let idx = b * width + o;
                        let dxh = dy[idx] * gamma[o];
                        dz[idx] =
                            c.inv_std[o] / bf * (bf * dxh - sum_d - c.normalized[idx] * sum_dx);
                    }
                }
                grad[self.slots.gamma[l].clone()].copy_from_slice(&dgamma);
                grad[self.slots.beta[l].clone()].copy_from_slice(&dbeta);
            }
            // hidden biases cancel under batch centering: gradient stays zero

            let w = &self.theta[self.slots.weights[l].clone()];
            let dw = &mut grad[self.slots.weights[l].clone()];
            for b in 0..batch {
                let xb = &c.input[b * fan_in..(b + 1) * fan_in];
                for o in 0..width {
                    let g = dz[b * width + o];
                    for (d, &xi) in dw[o * fan_in..(o + 1) * fan_in].iter_mut().zip(xb) {
                        *d += g * xi;
                    }
                }
            }
            let mut dx = vec![0.0; batch * fan_in];
            for b in 0..batch {
                let dxb = &mut dx[b * fan_in..(b + 1) * fan_in];
                for o in 0..width {
                    let g = dz[b * width + o];
                    for (d, &wi) in dxb.iter_mut().zip(&w[o * fan_in..(o + 1) * fan_in]) {
                        *d += g * wi;
                    }
                }
            }
            da = dx;
        }
        Ok(PredictorGradients {
            params: grad,
            inputs: da,
        })
    }

    /// Smallest |pre-activation| across hidden units in a cache; used to keep
    /// gradient-check fixtures away from ReLU kinks.
    pub fn kink_margin(cache: &ForwardCache) -> f64 {
        cache
            .hidden
            .iter()
            .flat_map(|h| h.pre_relu.iter())
            .fold(f64::INFINITY, |m, y| m.min(y.abs()))
    }
}

impl AsRef<[f64]> for crate::layout::SignalVector {
    fn as_ref(&self) -> &[f64] {
        &self.values
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct LinearFile {
    weights: Vec<Vec<f64>>,
    bias: Vec<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct BatchNormFile {
    gamma: Vec<f64>,
    beta: Vec<f64>,
    running_mean: Vec<f64>,
    running_var: Vec<f64>,
}

/// Versioned on-disk form of [`PredictorParams`].
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PredictorFile {
    format_version: u64,
    inputs: usize,
    m: usize,
    n: usize,
    hidden: Vec<usize>,
    layers: Vec<LinearFile>,
    batch_norm: Vec<BatchNormFile>,
}

impl From<&PredictorParams> for PredictorFile {
    fn from(p: &PredictorParams) -> Self {
        let shapes = p.dims.layer_shapes();
        let layers = shapes
            .iter()
            .enumerate()
            .map(|(l, &(fan_in, _))| LinearFile {
                weights: p.theta[p.slots.weights[l].clone()]
                    .chunks(fan_in)
                    .map(<[f64]>::to_vec)
                    .collect(),
                bias: p.theta[p.slots.biases[l].clone()].to_vec(),
            })
            .collect();
        let batch_norm = (0..HIDDEN_LAYERS)
            .map(|l| BatchNormFile {
                gamma: p.theta[p.slots.gamma[l].clone()].to_vec(),
                beta: p.theta[p.slots.beta[l].clone()].to_vec(),
                running_mean: p.running_mean[l].clone(),
                running_var: p.running_var[l].clone(),
            })
            .collect();
        PredictorFile {
            format_version: FORMAT_VERSION,
            inputs: p.dims.inputs,
            m: p.dims.m,
            n: p.dims.n,
            hidden: vec![HIDDEN_WIDTH; HIDDEN_LAYERS],
            layers,
            batch_norm,
        }
    }
}

impl PredictorFile {
    pub fn from_json(text: &str, context: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::parse(context, &e))
    }

    /// Rebuilds parameters, checking every dimension. With `expect`, the
    /// `(inputs, m, n)` triple must also match.
    pub fn into_params(self, expect: Option<(usize, usize, usize)>) -> Result<PredictorParams> {
        if self.format_version != FORMAT_VERSION {
            return Err(Error::UnsupportedVersion {
                found: self.format_version,
                expected: FORMAT_VERSION,
            });
        }
        if let Some((inputs, m, n)) = expect {
            if (inputs, m, n) != (self.inputs, self.m, self.n) {
                return Err(Error::invalid(format!(
                    "predictor is for {} sensors on a {}x{} grid, expected {} sensors on {}x{}",
                    self.inputs, self.m, self.n, inputs, m, n
                )));
            }
        }
        let mut p = PredictorParams::zeroed(self.inputs, self.m, self.n)?;
        if self.hidden != vec![HIDDEN_WIDTH; HIDDEN_LAYERS]
            || self.layers.len() != HIDDEN_LAYERS + 1
            || self.batch_norm.len() != HIDDEN_LAYERS
        {
            return Err(Error::invalid(
                "predictor file has the wrong layer structure",
            ));
        }
        let shapes = p.dims.layer_shapes();
        for (l, layer) in self.layers.iter().enumerate() {
            let (fan_in, fan_out) = shapes[l];
            if layer.weights.len() != fan_out
                || layer.weights.iter().any(|r| r.len() != fan_in)
                || layer.bias.len() != fan_out
            {
                return Err(Error::invalid(format!(
                    "layer {l} should be {fan_out}x{fan_in}"
                )));
            }
            let flat: Vec<f64> = layer.weights.concat();
            p.theta[p.slots.weights[l].clone()].copy_from_slice(&flat);
            p.theta[p.slots.biases[l].clone()].copy_from_slice(&layer.bias);
        }
        for (l, bn) in self.batch_norm.into_iter().enumerate() {
            let ok = [&bn.gamma, &bn.beta, &bn.running_mean, &bn.running_var]
                .iter()
                .all(|v| v.len() == HIDDEN_WIDTH);
            if !ok || bn.running_var.iter().any(|&v| !(v > 0.0)) {
                return Err(Error::invalid(format!(
                    "invalid batch-norm state in layer {l}"
                )));
            }
            p.theta[p.slots.gamma[l].clone()].copy_from_slice(&bn.gamma);
            p.theta[p.slots.beta[l].clone()].copy_from_slice(&bn.beta);
            p.running_mean[l] = bn.running_mean;
            p.running_var[l] = bn.running_var;
        }
        Ok(p)
    }
}
