//! Straight-line sensors in the UV domain and their length signals.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{BSplineSurface, SurfaceSample};

/// Default number of chord samples per sensor.
pub const DEFAULT_SAMPLES: usize = 32;
/// Default sharpness of the smoothed Heaviside in the occupancy mask.
pub const DEFAULT_ALPHA: f64 = 10.0;
pub const DEFAULT_SENSORS: usize = 20;
/// Occupancy at or above this value counts a sensor as present.
pub const ACTIVE_THRESHOLD: f64 = 0.5;
/// Regularizer inside chord and distance norms, mm^2.
pub const NORM_EPS: f64 = 1e-24;

/// UV endpoints of one sensor.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(from = "[f64; 4]", into = "[f64; 4]")]
pub struct Sensor {
    pub u_s: f64,
    pub v_s: f64,
    pub u_e: f64,
    pub v_e: f64,
}

impl Sensor {
    pub const fn new(u_s: f64, v_s: f64, u_e: f64, v_e: f64) -> Self {
        Sensor { u_s, v_s, u_e, v_e }
    }

    pub fn to_array(self) -> [f64; 4] {
        [self.u_s, self.v_s, self.u_e, self.v_e]
    }

    pub fn reversed(self) -> Sensor {
        Sensor::new(self.u_e, self.v_e, self.u_s, self.v_s)
    }

    /// Reflection about the line u = 0.5.
    pub fn mirrored(self) -> Sensor {
        Sensor::new(1.0 - self.u_s, self.v_s, 1.0 - self.u_e, self.v_e)
    }

    pub fn in_unit_square(self) -> bool {
        self.to_array().iter().all(|c| (0.0..=1.0).contains(c))
    }

    fn clamped(self, u_max: f64) -> Sensor {
        Sensor::new(
            self.u_s.clamp(0.0, u_max),
            self.v_s.clamp(0.0, 1.0),
            self.u_e.clamp(0.0, u_max),
            self.v_e.clamp(0.0, 1.0),
        )
    }
}

impl From<[f64; 4]> for Sensor {
    fn from([u_s, v_s, u_e, v_e]: [f64; 4]) -> Self {
        Sensor { u_s, v_s, u_e, v_e }
    }
}

impl From<Sensor> for [f64; 4] {
    fn from(s: Sensor) -> Self {
        s.to_array()
    }
}

/// The design variable: M sensors with raw occupancy logits.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SensorLayout {
    pub alpha: f64,
    pub sensors: Vec<Sensor>,
    pub logits: Vec<f64>,
}

impl SensorLayout {
    pub fn new(sensors: Vec<Sensor>, logits: Vec<f64>, alpha: f64) -> Result<Self> {
        let layout = SensorLayout {
            alpha,
            sensors,
            logits,
        };
        layout.validate()?;
        Ok(layout)
    }

    /// `count` sensors with endpoints uniform in [0.05, 0.95]^2 and logits 0.
    pub fn random<R: Rng>(count: usize, alpha: f64, rng: &mut R) -> Result<Self> {
        let sensors = (0..count)
            .map(|_| {
                let mut c = || rng.gen_range(0.05..0.95);
                Sensor::new(c(), c(), c(), c())
            })
            .collect();
        SensorLayout::new(sensors, vec![0.0; count], alpha)
    }

    pub fn validate(&self) -> Result<()> {
        if self.sensors.is_empty() {
            return Err(Error::invalid("layout needs at least one sensor"));
        }
        if self.sensors.len() != self.logits.len() {
            return Err(Error::invalid(format!(
                "layout has {} sensors but {} logits",
                self.sensors.len(),
                self.logits.len()
            )));
        }
        if !(self.alpha > 0.0 && self.alpha.is_finite()) {
            return Err(Error::invalid("alpha must be positive"));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.sensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sensors.is_empty()
    }

    pub fn occupancy(&self) -> Vec<f64> {
        self.logits
            .iter()
            .map(|&b| project_occupancy(b, self.alpha))
            .collect()
    }
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Smoothed binary occupancy `0.5 * (1 + tanh(alpha * (sigmoid(b) - 0.5)))`.
pub fn project_occupancy(logit: f64, alpha: f64) -> f64 {
    0.5 * (1.0 + (alpha * (sigmoid(logit) - 0.5)).tanh())
}

/// d(occupancy)/d(logit).
pub fn occupancy_derivative(logit: f64, alpha: f64) -> f64 {
    let s = sigmoid(logit);
    let t = (alpha * (s - 0.5)).tanh();
    0.5 * alpha * (1.0 - t * t) * s * (1.0 - s)
}

fn lerp(a: f64, b: f64, w: f64) -> f64 {
    // stays inside [min(a,b), max(a,b)] even under rounding
    let x = (b - a) * w + a;
    if a <= b {
        x.clamp(a, b)
    } else {
        x.clamp(b, a)
    }
}

/// K evenly spaced UV samples from start to end, inclusive.
pub fn sample_uv(sensor: &Sensor, samples: usize) -> Result<Vec<(f64, f64)>> {
    if samples < 2 {
        return Err(Error::invalid(format!(
            "need at least 2 samples per sensor, got {samples}"
        )));
    }
    let last = samples - 1;
    Ok((0..samples)
        .map(|t| {
            if t == last {
                (sensor.u_e, sensor.v_e)
            } else {
                let w = t as f64 / last as f64;
                (
                    lerp(sensor.u_s, sensor.u_e, w),
                    lerp(sensor.v_s, sensor.v_e, w),
                )
            }
        })
        .collect())
}

/// Surface samples (with partials) along a sensor.
pub(crate) fn sensor_samples(
    surface: &BSplineSurface,
    sensor: &Sensor,
    samples: usize,
) -> Result<Vec<SurfaceSample>> {
    sample_uv(sensor, samples)?
        .into_iter()
        .map(|(u, v)| surface.sample(u, v))
        .collect()
}

pub(crate) fn regularized_norm(d: crate::geometry::Vec3) -> f64 {
    (d.norm_squared() + NORM_EPS).sqrt()
}

/// Chord-sum length of the sensor's image on the surface, mm.
pub fn sensor_length(surface: &BSplineSurface, sensor: &Sensor, samples: usize) -> Result<f64> {
    let uv = sample_uv(sensor, samples)?;
    let mut prev = surface.point(uv[0].0, uv[0].1)?;
    let mut length = 0.0;
    for &(u, v) in &uv[1..] {
        let p = surface.point(u, v)?;
        length += regularized_norm(p - prev);
        prev = p;
    }
    Ok(length)
}

/// Raw (unmasked) lengths of every sensor.
pub fn sensor_lengths(
    surface: &BSplineSurface,
    layout: &SensorLayout,
    samples: usize,
) -> Result<Vec<f64>> {
    layout
        .sensors
        .iter()
        .map(|s| sensor_length(surface, s, samples))
        .collect()
}

/// Masked sensor readings `occupancy_k * length_k`, mm.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SignalVector {
    pub values: Vec<f64>,
}

pub fn signal_vector(
    surface: &BSplineSurface,
    layout: &SensorLayout,
    samples: usize,
) -> Result<SignalVector> {
    layout.validate()?;
    let lengths = sensor_lengths(surface, layout, samples)?;
    let values = lengths
        .iter()
        .zip(&layout.logits)
        .map(|(&l, &b)| project_occupancy(b, layout.alpha) * l)
        .collect();
    Ok(SignalVector { values })
}

/// Indices with occupancy >= `threshold`, ascending.
pub fn active_sensors(layout: &SensorLayout, threshold: f64) -> Vec<usize> {
    layout
        .logits
        .iter()
        .enumerate()
        .filter(|(_, &b)| project_occupancy(b, layout.alpha) >= threshold)
        .map(|(k, _)| k)
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConstraintMode {
    #[default]
    Free,
    /// u restricted to [0, 0.5].
    HalfDomain,
    /// Sensor 2k+1 is the reflection of sensor 2k about u = 0.5, with a tied logit.
    MirroredPairs,
}

impl ConstraintMode {
    pub fn u_max(self) -> f64 {
        match self {
            ConstraintMode::HalfDomain => 0.5,
            _ => 1.0,
        }
    }

    pub fn check_count(self, count: usize) -> Result<()> {
        if self == ConstraintMode::MirroredPairs && !count.is_multiple_of(2) {
            return Err(Error::invalid(format!(
                "mirrored_pairs needs an even number of sensors, got {count}"
            )));
        }
        Ok(())
    }
}

impl std::str::FromStr for ConstraintMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "free" => Ok(ConstraintMode::Free),
            "half_domain" => Ok(ConstraintMode::HalfDomain),
            "mirrored_pairs" => Ok(ConstraintMode::MirroredPairs),
            other => Err(Error::invalid(format!("unknown constraint mode {other:?}"))),
        }
    }
}

impl std::fmt::Display for ConstraintMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            ConstraintMode::Free => "free",
            ConstraintMode::HalfDomain => "half_domain",
            ConstraintMode::MirroredPairs => "mirrored_pairs",
        })
    }
}

/// Projects a layout onto the feasible set of `mode`.
pub fn apply_domain_constraints(
    layout: &SensorLayout,
    mode: ConstraintMode,
) -> Result<SensorLayout> {
    mode.check_count(layout.len())?;
    let mut out = layout.clone();
    project_in_place(&mut out, mode);
    Ok(out)
}

pub(crate) fn project_in_place(layout: &mut SensorLayout, mode: ConstraintMode) {
    let u_max = mode.u_max();
    for s in &mut layout.sensors {
        *s = s.clamped(u_max);
    }
    if mode == ConstraintMode::MirroredPairs {
        for k in (0..layout.len() / 2).map(|p| 2 * p) {
            layout.sensors[k + 1] = layout.sensors[k].mirrored();
            layout.logits[k + 1] = layout.logits[k];
        }
    }
}

/// On-disk layout: the raw design variables plus, on export, the binarized
/// set of active sensors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayoutFile {
    pub alpha: f64,
    pub sensors: Vec<Sensor>,
    pub logits: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub active: Option<Vec<Sensor>>,
}

impl LayoutFile {
    pub fn raw(layout: &SensorLayout) -> Self {
        LayoutFile {
            alpha: layout.alpha,
            sensors: layout.sensors.clone(),
            logits: layout.logits.clone(),
            active: None,
        }
    }

    pub fn export(layout: &SensorLayout) -> Self {
        let active = active_sensors(layout, ACTIVE_THRESHOLD)
            .into_iter()
            .map(|k| layout.sensors[k])
            .collect();
        LayoutFile {
            active: Some(active),
            ..Self::raw(layout)
        }
    }

    pub fn into_layout(self) -> Result<SensorLayout> {
        SensorLayout::new(self.sensors, self.logits, self.alpha)
    }

    pub fn from_json(text: &str, context: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::parse(context, &e))
    }
}
