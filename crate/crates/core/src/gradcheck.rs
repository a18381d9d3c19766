//! Finite-difference verification of every analytic gradient on small random
//! fixtures.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::geometry::{flat_grid, BSplineSurface, ControlGrid, Vec3};
use crate::grad::{
    backward_total, finite_difference_check, finite_difference_gradients, forward_total,
    geometry_gradients, max_relative_error, sensor_length_and_grad, LayoutGrad,
};
use crate::layout::{sensor_length, sensor_lengths, Sensor, SensorLayout};
use crate::losses::{sensor_pairs, soft_min_distance, LossBreakdown, LossConfig};
use crate::predictor::PredictorParams;
use crate::rng::{substream, Stream};

pub const DEFAULT_TOLERANCE: f64 = 1e-4;
pub const DEFAULT_STEP: f64 = 1e-6;
pub const DEFAULT_FIXTURES: usize = 20;
/// Fixtures closer than this to a ReLU kink or a hinge threshold are redrawn.
pub const KINK_MARGIN: f64 = 1e-3;

const GRID: usize = 5;
const EXTENT_MM: f64 = 100.0;
const SENSORS: usize = 4;
const BATCH: usize = 3;
const SAMPLES: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Term {
    SensorLength,
    Recon,
    Overlap,
    MinSpace,
    TotalLength,
    MinLength,
    Total,
}

impl Term {
    pub const ALL: [Term; 7] = [
        Term::SensorLength,
        Term::Recon,
        Term::Overlap,
        Term::MinSpace,
        Term::TotalLength,
        Term::MinLength,
        Term::Total,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Term::SensorLength => "sensor_length",
            Term::Recon => "recon",
            Term::Overlap => "overlap",
            Term::MinSpace => "min_space",
            Term::TotalLength => "total_length",
            Term::MinLength => "min_length",
            Term::Total => "total",
        }
    }
}

impl fmt::Display for Term {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Term {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Term::ALL
            .into_iter()
            .find(|t| t.name() == s)
            .ok_or_else(|| Error::invalid(format!("unknown loss term `{s}`")))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradcheckConfig {
    pub seed: u64,
    pub fixtures: usize,
    pub terms: Vec<Term>,
    pub step: f64,
    pub tolerance: f64,
    pub exec: Exec,
}

impl Default for GradcheckConfig {
    fn default() -> Self {
        GradcheckConfig {
            seed: 0,
            fixtures: DEFAULT_FIXTURES,
            terms: Term::ALL.to_vec(),
            step: DEFAULT_STEP,
            tolerance: DEFAULT_TOLERANCE,
            exec: Exec::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TermResult {
    pub term: Term,
    pub fixtures: usize,
    pub coordinates: usize,
    pub max_rel_error: f64,
    pub passed: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GradcheckReport {
    pub results: Vec<TermResult>,
    pub tolerance: f64,
}

impl GradcheckReport {
    pub fn passed(&self) -> bool {
        self.results.iter().all(|r| r.passed)
    }

    pub fn table(&self) -> String {
        let mut out = format!(
            "{:<14} {:>8} {:>12} {:>14}  status\n",
            "term", "fixtures", "coordinates", "max_rel_err"
        );
        for r in &self.results {
            out.push_str(&format!(
                "{:<14} {:>8} {:>12} {:>14.3e}  {}\n",
                r.term.name(),
                r.fixtures,
                r.coordinates,
                r.max_rel_error,
                if r.passed { "ok" } else { "FAIL" }
            ));
        }
        out
    }
}

/// A random, threshold-clear evaluation point for the composed loss.
#[derive(Debug, Clone)]
pub struct Fixture {
    pub truths: Vec<BSplineSurface>,
    pub base: ControlGrid,
    pub layout: SensorLayout,
    pub params: PredictorParams,
    pub cfg: LossConfig,
}

fn perturbed_grid<R: Rng>(base: &ControlGrid, rng: &mut R, xy: f64, z: f64) -> Result<ControlGrid> {
    let points = base
        .points
        .iter()
        .map(|p| {
            *p + Vec3::new(
                rng.gen_range(-xy..=xy),
                rng.gen_range(-xy..=xy),
                rng.gen_range(-z..=z),
            )
        })
        .collect();
    ControlGrid::new(base.m, base.n, points)
}

/// A random surface over a 100 mm square, for sensor-length checks.
pub fn random_surface<R: Rng>(rng: &mut R) -> Result<BSplineSurface> {
    let base = flat_grid(GRID, GRID, EXTENT_MM, EXTENT_MM)?;
    BSplineSurface::new(perturbed_grid(&base, rng, 5.0, 20.0)?)
}

fn draw_fixture(rng: &mut ChaCha8Rng) -> Result<Fixture> {
    let base = flat_grid(GRID, GRID, EXTENT_MM, EXTENT_MM)?;
    let truths = (0..BATCH)
        .map(|_| BSplineSurface::new(perturbed_grid(&base, rng, 3.0, 15.0)?))
        .collect::<Result<Vec<_>>>()?;
    let mut layout = SensorLayout::random(SENSORS, crate::layout::DEFAULT_ALPHA, rng)?;
    for b in &mut layout.logits {
        *b = rng.gen_range(-0.3..0.3);
    }
    let mut params = PredictorParams::init(SENSORS, GRID, GRID, rng.gen())?;
    let slots = params.slots().clone();
    for l in 0..slots.gamma.len() {
        for g in &mut params.theta[slots.gamma[l].clone()] {
            *g = rng.gen_range(0.5..1.5);
        }
        for b in &mut params.theta[slots.beta[l].clone()] {
            *b = rng.gen_range(-0.5..0.5);
        }
    }
    for b in &mut params.theta[slots.biases[slots.biases.len() - 1].clone()] {
        *b = rng.gen_range(-1.0..1.0);
    }
    let cfg = LossConfig {
        samples: SAMPLES,
        ..LossConfig::default()
    };
    Ok(Fixture {
        truths,
        base,
        layout,
        params,
        cfg,
    })
}

fn clear_of_thresholds(f: &Fixture) -> Result<bool> {
    let refs: Vec<&BSplineSurface> = f.truths.iter().collect();
    let state = forward_total(
        &refs,
        &f.base,
        &f.layout,
        &f.params,
        &f.cfg,
        Exec::Sequential,
    )?;
    if PredictorParams::kink_margin(state.cache()) < KINK_MARGIN {
        return Ok(false);
    }
    let anchor = &f.truths[0];
    let lengths = sensor_lengths(anchor, &f.layout, f.cfg.samples)?;
    if lengths
        .iter()
        .any(|l| (f.cfg.l_min - l).abs() < KINK_MARGIN)
    {
        return Ok(false);
    }
    for (i, j) in sensor_pairs(f.layout.len()) {
        let d = soft_min_distance(
            anchor,
            &f.layout.sensors[i],
            &f.layout.sensors[j],
            f.cfg.samples,
            f.cfg.beta,
        )?;
        if (f.cfg.tau - d).abs() < KINK_MARGIN {
            return Ok(false);
        }
    }
    Ok(true)
}

/// Draws fixture `index` of a seeded family, redrawing until it is clear of
/// every kink.
pub fn fixture(seed: u64, index: usize) -> Result<Fixture> {
    let mut rng = substream(seed, Stream::Fixture);
    rng.set_stream(((Stream::Fixture as u64) << 32) | index as u64);
    for _ in 0..100 {
        let f = draw_fixture(&mut rng)?;
        if clear_of_thresholds(&f)? {
            return Ok(f);
        }
    }
    Err(Error::Numeric(
        "could not draw a fixture clear of the loss thresholds".into(),
    ))
}

impl Fixture {
    fn point(&self) -> Vec<f64> {
        self.layout
            .sensors
            .iter()
            .flat_map(|s| s.to_array())
            .chain(self.layout.logits.iter().copied())
            .chain(self.params.theta.iter().copied())
            .collect()
    }

    fn at(&self, x: &[f64]) -> (SensorLayout, PredictorParams) {
        let m = self.layout.len();
        let mut layout = self.layout.clone();
        for (k, s) in layout.sensors.iter_mut().enumerate() {
            *s = Sensor::new(x[4 * k], x[4 * k + 1], x[4 * k + 2], x[4 * k + 3]);
        }
        layout.logits.copy_from_slice(&x[4 * m..5 * m]);
        let mut params = self.params.clone();
        params.theta.copy_from_slice(&x[5 * m..]);
        (layout, params)
    }

    fn breakdown(&self, x: &[f64]) -> Option<LossBreakdown> {
        let (layout, params) = self.at(x);
        let refs: Vec<&BSplineSurface> = self.truths.iter().collect();
        forward_total(
            &refs,
            &self.base,
            &layout,
            &params,
            &self.cfg,
            Exec::Sequential,
        )
        .ok()
        .map(|s| s.breakdown)
    }

    fn analytic(&self, term: Term) -> Result<Vec<f64>> {
        let refs: Vec<&BSplineSurface> = self.truths.iter().collect();
        let composed = |cfg: &LossConfig| -> Result<Vec<f64>> {
            let state = forward_total(
                &refs,
                &self.base,
                &self.layout,
                &self.params,
                cfg,
                Exec::Sequential,
            )?;
            let g = backward_total(&state, &self.layout, &self.params)?;
            Ok(g.layout_flat().into_iter().chain(g.d_predictor).collect())
        };
        match term {
            Term::Recon => composed(&LossConfig {
                w_t: 0.0,
                w_m: 0.0,
                w_p: 0.0,
                w_s: 0.0,
                ..self.cfg
            }),
            Term::Total => composed(&self.cfg),
            Term::SensorLength => Err(Error::invalid("sensor length is checked per sensor")),
            _ => {
                let g =
                    geometry_gradients(&self.truths[0], &self.layout, &self.cfg, Exec::Sequential)?;
                let part: &LayoutGrad = match term {
                    Term::Overlap => &g.overlap.1,
                    Term::MinSpace => &g.min_space.1,
                    Term::TotalLength => &g.total_length.1,
                    _ => &g.min_length.1,
                };
                let mut v = part.flat();
                v.resize(5 * self.layout.len() + self.params.param_count(), 0.0);
                Ok(v)
            }
        }
    }

    /// Max relative error of each composed-loss term over all of
    /// `(L, b, theta)`, from one shared difference sweep.
    pub fn check(&self, terms: &[Term], step: f64) -> Result<Vec<(Term, usize, f64)>> {
        let terms: Vec<Term> = terms
            .iter()
            .copied()
            .filter(|t| *t != Term::SensorLength)
            .collect();
        let x = self.point();
        let pick = |b: &LossBreakdown, t: Term| match t {
            Term::Recon => b.recon,
            Term::Overlap => b.overlap,
            Term::MinSpace => b.min_space,
            Term::TotalLength => b.total_length,
            Term::MinLength => b.min_length,
            _ => b.total,
        };
        let fd = finite_difference_gradients(
            |p| match self.breakdown(p) {
                Some(b) => terms.iter().map(|&t| pick(&b, t)).collect(),
                None => vec![f64::NAN; terms.len()],
            },
            &x,
            step,
        )?;
        terms
            .iter()
            .zip(&fd)
            .map(|(&t, d)| Ok((t, x.len(), max_relative_error(&self.analytic(t)?, d)?)))
            .collect()
    }
}

/// Checks `grad_sensor_length` on one random surface and sensor.
pub fn check_sensor_length<R: Rng>(rng: &mut R, samples: usize, step: f64) -> Result<f64> {
    let surface = random_surface(rng)?;
    let mut c = || rng.gen_range(0.05..0.95);
    let sensor = Sensor::new(c(), c(), c(), c());
    let (_, g) = sensor_length_and_grad(&surface, &sensor, samples)?;
    finite_difference_check(
        |p| {
            sensor_length(&surface, &Sensor::new(p[0], p[1], p[2], p[3]), samples)
                .unwrap_or(f64::NAN)
        },
        &sensor.to_array(),
        &g,
        step,
    )
}

pub fn run_gradcheck(cfg: &GradcheckConfig) -> Result<GradcheckReport> {
    if cfg.fixtures == 0 {
        return Err(Error::invalid("need at least one fixture"));
    }
    let fixtures = cfg.exec.try_map(cfg.fixtures, |k| fixture(cfg.seed, k))?;
    let composed = cfg
        .exec
        .try_map(fixtures.len(), |k| fixtures[k].check(&cfg.terms, cfg.step))?;
    let mut results = Vec::new();
    for &term in &cfg.terms {
        let (coordinates, errors): (usize, Vec<f64>) = if term == Term::SensorLength {
            let errs = cfg.exec.try_map(cfg.fixtures, |k| {
                let mut rng = substream(cfg.seed, Stream::Fixture);
                rng.set_stream(((Stream::Fixture as u64) << 40) | k as u64);
                check_sensor_length(&mut rng, crate::layout::DEFAULT_SAMPLES, cfg.step)
            })?;
            (4 * cfg.fixtures, errs)
        } else {
            let rows: Vec<(usize, f64)> = composed
                .iter()
                .flat_map(|r| r.iter().filter(|e| e.0 == term).map(|e| (e.1, e.2)))
                .collect();
            (
                rows.iter().map(|r| r.0).sum(),
                rows.iter().map(|r| r.1).collect(),
            )
        };
        let max_rel_error = errors.iter().copied().fold(0.0, f64::max);
        results.push(TermResult {
            term,
            fixtures: cfg.fixtures,
            coordinates,
            max_rel_error,
            passed: max_rel_error <= cfg.tolerance,
        });
    }
    Ok(GradcheckReport {
        results,
        tolerance: cfg.tolerance,
    })
}
