//! Loss terms: reconstruction error, overlap avoidance, inter-sensor spacing,
//! and length control, plus their weighted sum.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::geometry::{BSplineSurface, ControlGrid, Vec3};
use crate::layout::{
    regularized_norm, sample_uv, sensor_lengths, Sensor, SensorLayout, DEFAULT_ALPHA,
    DEFAULT_SAMPLES,
};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    pub w_t: f64,
    pub w_m: f64,
    pub w_p: f64,
    pub w_s: f64,
    /// Minimum spacing between sensors, mm.
    pub tau: f64,
    /// Minimum sensor length, mm.
    pub l_min: f64,
    pub alpha: f64,
    /// Soft-min temperature, 1/mm.
    pub beta: f64,
    /// Samples per sensor.
    pub samples: usize,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            w_t: 0.005,
            w_m: 0.1,
            w_p: 0.6,
            w_s: 0.005,
            tau: 10.0,
            l_min: 50.0,
            alpha: DEFAULT_ALPHA,
            beta: 100.0,
            samples: DEFAULT_SAMPLES,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        let weights = [self.w_t, self.w_m, self.w_p, self.w_s];
        if weights.iter().any(|w| !(*w >= 0.0 && w.is_finite())) {
            return Err(Error::invalid(
                "loss weights must be finite and nonnegative",
            ));
        }
        if !(self.tau >= 0.0 && self.l_min >= 0.0) {
            return Err(Error::invalid("tau and l_min must be nonnegative"));
        }
        if !(self.alpha > 0.0 && self.beta > 0.0) {
            return Err(Error::invalid("alpha and beta must be positive"));
        }
        if self.samples < 2 {
            return Err(Error::invalid("need at least 2 samples per sensor"));
        }
        Ok(())
    }
}

/// Per-term values of one loss evaluation. `overlap` and `min_space` are the
/// occupancy-weighted pair sums, so
/// `total = recon + w_t*total_length + w_m*min_length + w_p*overlap + w_s*min_space`.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub recon: f64,
    pub total_length: f64,
    pub min_length: f64,
    pub overlap: f64,
    pub min_space: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn recombine(&self, cfg: &LossConfig) -> f64 {
        self.recon
            + cfg.w_t * self.total_length
            + cfg.w_m * self.min_length
            + cfg.w_p * self.overlap
            + cfg.w_s * self.min_space
    }
}

/// Mean squared control-point error over a batch, mm^2.
pub fn loss_recon<P, T>(predicted: &[P], truth: &[T]) -> Result<f64>
where
    P: AsRef<ControlGrid>,
    T: AsRef<ControlGrid>,
{
    if predicted.len() != truth.len() || predicted.is_empty() {
        return Err(Error::invalid(format!(
            "reconstruction needs matching nonempty batches, got {} predicted and {} truth",
            predicted.len(),
            truth.len()
        )));
    }
    let mut sum = 0.0;
    for (p, t) in predicted.iter().zip(truth) {
        let (p, t) = (p.as_ref(), t.as_ref());
        if !p.same_schema(t) {
            return Err(Error::invalid(format!(
                "grid mismatch: predicted {}x{} vs truth {}x{}",
                p.m, p.n, t.m, t.n
            )));
        }
        sum += p
            .points
            .iter()
            .zip(&t.points)
            .map(|(a, b)| (*a - *b).norm_squared())
            .sum::<f64>();
    }
    let first = truth[0].as_ref();
    Ok(sum / (first.m * first.n * truth.len()) as f64)
}

/// Signed area of the triangle (a, b, p), doubled.
pub(crate) fn orient(a: (f64, f64), b: (f64, f64), p: (f64, f64)) -> f64 {
    (b.0 - a.0) * (p.1 - a.1) - (b.1 - a.1) * (p.0 - a.0)
}

fn endpoints(s: &Sensor) -> ((f64, f64), (f64, f64)) {
    ((s.u_s, s.v_s), (s.u_e, s.v_e))
}

/// Side tests of the two segments. `f1 > 0` iff the endpoints of `s1` lie
/// strictly on opposite sides of the line through `s2`, `f2` likewise with
/// the roles swapped; an endpoint on the other line gives 0.
pub fn overlap_terms(s1: &Sensor, s2: &Sensor) -> (f64, f64) {
    let (a, b) = endpoints(s1);
    let (c, d) = endpoints(s2);
    let f1 = -orient(c, d, a) * orient(c, d, b);
    let f2 = -orient(a, b, c) * orient(a, b, d);
    (f1, f2)
}

/// Smoothed crossing indicator in [0, 1].
pub fn loss_overlap(s1: &Sensor, s2: &Sensor, alpha: f64) -> f64 {
    let (f1, f2) = overlap_terms(s1, s2);
    0.25 * (1.0 + (alpha * f1).tanh()) * (1.0 + (alpha * f2).tanh())
}

/// Closed segment intersection, including touching endpoints and collinear
/// overlap.
pub fn segments_intersect(s1: &Sensor, s2: &Sensor) -> bool {
    let (a, b) = endpoints(s1);
    let (c, d) = endpoints(s2);
    let o1 = orient(c, d, a);
    let o2 = orient(c, d, b);
    let o3 = orient(a, b, c);
    let o4 = orient(a, b, d);
    let within = |p: (f64, f64), q: (f64, f64), r: (f64, f64)| {
        r.0 >= p.0.min(q.0) && r.0 <= p.0.max(q.0) && r.1 >= p.1.min(q.1) && r.1 <= p.1.max(q.1)
    };
    if ((o1 > 0.0 && o2 < 0.0) || (o1 < 0.0 && o2 > 0.0))
        && ((o3 > 0.0 && o4 < 0.0) || (o3 < 0.0 && o4 > 0.0))
    {
        return true;
    }
    (o1 == 0.0 && within(c, d, a))
        || (o2 == 0.0 && within(c, d, b))
        || (o3 == 0.0 && within(a, b, c))
        || (o4 == 0.0 && within(a, b, d))
}

/// Number of intersecting pairs among the given sensor indices.
pub fn count_intersections(layout: &SensorLayout, indices: &[usize]) -> usize {
    let mut count = 0;
    for (x, &i) in indices.iter().enumerate() {
        for &j in &indices[x + 1..] {
            if segments_intersect(&layout.sensors[i], &layout.sensors[j]) {
                count += 1;
            }
        }
    }
    count
}

pub(crate) fn sample_points(
    surface: &BSplineSurface,
    sensor: &Sensor,
    samples: usize,
) -> Result<Vec<Vec3>> {
    sample_uv(sensor, samples)?
        .into_iter()
        .map(|(u, v)| surface.point(u, v))
        .collect()
}

/// Log-sum-exp soft minimum of all pairwise distances between two point sets.
pub fn soft_min_points(a: &[Vec3], b: &[Vec3], beta: f64) -> f64 {
    let dists: Vec<f64> = a
        .iter()
        .flat_map(|p| b.iter().map(move |q| regularized_norm(*p - *q)))
        .collect();
    let min = dists.iter().copied().fold(f64::INFINITY, f64::min);
    let sum: f64 = dists.iter().map(|d| (-beta * (d - min)).exp()).sum();
    min - sum.ln() / beta
}

/// Smooth underestimate of the minimum distance between two sensors'
/// surface images, within `ln(K^2) / beta` of the sampled minimum.
pub fn soft_min_distance(
    surface: &BSplineSurface,
    s1: &Sensor,
    s2: &Sensor,
    samples: usize,
    beta: f64,
) -> Result<f64> {
    if !(beta > 0.0) {
        return Err(Error::invalid("beta must be positive"));
    }
    let a = sample_points(surface, s1, samples)?;
    let b = sample_points(surface, s2, samples)?;
    Ok(soft_min_points(&a, &b, beta))
}

/// Exhaustive minimum distance over the K x K sample pairs, mm.
pub fn sampled_min_distance(
    surface: &BSplineSurface,
    s1: &Sensor,
    s2: &Sensor,
    samples: usize,
) -> Result<f64> {
    let a = sample_points(surface, s1, samples)?;
    let b = sample_points(surface, s2, samples)?;
    Ok(a.iter()
        .flat_map(|p| b.iter().map(move |q| (*p - *q).norm()))
        .fold(f64::INFINITY, f64::min))
}

/// `(tau - d)^2` below the threshold, 0 at or above it.
pub fn min_space_penalty(distance: f64, tau: f64) -> f64 {
    let gap = tau - distance;
    if gap > 0.0 {
        gap * gap
    } else {
        0.0
    }
}

pub fn loss_min_space(
    surface: &BSplineSurface,
    s1: &Sensor,
    s2: &Sensor,
    cfg: &LossConfig,
) -> Result<f64> {
    let d = soft_min_distance(surface, s1, s2, cfg.samples, cfg.beta)?;
    Ok(min_space_penalty(d, cfg.tau))
}

/// Sum of occupancy-masked sensor lengths, mm.
pub fn loss_total_length(
    surface: &BSplineSurface,
    layout: &SensorLayout,
    samples: usize,
) -> Result<f64> {
    let lengths = sensor_lengths(surface, layout, samples)?;
    Ok(lengths
        .iter()
        .zip(layout.occupancy())
        .map(|(l, h)| h * l)
        .sum())
}

/// `(l_min - l)^2` for short sensors, 0 otherwise.
pub fn min_length_penalty(length: f64, l_min: f64) -> f64 {
    min_space_penalty(length, l_min)
}

pub fn loss_min_length(
    surface: &BSplineSurface,
    layout: &SensorLayout,
    cfg: &LossConfig,
) -> Result<f64> {
    let lengths = sensor_lengths(surface, layout, cfg.samples)?;
    Ok(lengths
        .iter()
        .zip(layout.occupancy())
        .map(|(&l, h)| h * min_length_penalty(l, cfg.l_min))
        .sum())
}

/// All unordered index pairs `(i, j)` with `i < j`.
pub fn sensor_pairs(count: usize) -> Vec<(usize, usize)> {
    (0..count)
        .flat_map(|i| (i + 1..count).map(move |j| (i, j)))
        .collect()
}

/// Geometry-dependent terms of the total loss, evaluated on one surface.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub(crate) struct GeometryTerms {
    pub total_length: f64,
    pub min_length: f64,
    pub overlap: f64,
    pub min_space: f64,
}

pub(crate) fn geometry_terms(
    surface: &BSplineSurface,
    layout: &SensorLayout,
    cfg: &LossConfig,
    exec: Exec,
) -> Result<GeometryTerms> {
    let occ = layout.occupancy();
    let lengths = sensor_lengths(surface, layout, cfg.samples)?;
    let points = exec.try_map(layout.len(), |k| {
        sample_points(surface, &layout.sensors[k], cfg.samples)
    })?;
    let pairs = sensor_pairs(layout.len());
    let per_pair = exec.map(pairs.len(), |p| {
        let (i, j) = pairs[p];
        let o = loss_overlap(&layout.sensors[i], &layout.sensors[j], layout.alpha);
        let d = soft_min_points(&points[i], &points[j], cfg.beta);
        (o, min_space_penalty(d, cfg.tau))
    });

    let mut terms = GeometryTerms::default();
    for k in 0..layout.len() {
        terms.total_length += occ[k] * lengths[k];
        terms.min_length += occ[k] * min_length_penalty(lengths[k], cfg.l_min);
    }
    for (&(i, j), &(o, s)) in pairs.iter().zip(&per_pair) {
        let w = occ[i] * occ[j];
        terms.overlap += w * o;
        terms.min_space += w * s;
    }
    Ok(terms)
}

/// Weighted total loss. Geometry terms are evaluated on the first truth
/// surface of the batch.
pub fn loss_total<P: AsRef<ControlGrid>>(
    truths: &[BSplineSurface],
    predicted: &[P],
    layout: &SensorLayout,
    cfg: &LossConfig,
) -> Result<LossBreakdown> {
    loss_total_with(truths, predicted, layout, cfg, Exec::default())
}

pub fn loss_total_with<P: AsRef<ControlGrid>>(
    truths: &[BSplineSurface],
    predicted: &[P],
    layout: &SensorLayout,
    cfg: &LossConfig,
    exec: Exec,
) -> Result<LossBreakdown> {
    cfg.validate()?;
    layout.validate()?;
    let anchor = truths
        .first()
        .ok_or_else(|| Error::invalid("loss needs a nonempty batch"))?;
    let recon = loss_recon(predicted, truths)?;
    let g = geometry_terms(anchor, layout, cfg, exec)?;
    let mut out = LossBreakdown {
        recon,
        total_length: g.total_length,
        min_length: g.min_length,
        overlap: g.overlap,
        min_space: g.min_space,
        total: 0.0,
    };
    out.total = out.recombine(cfg);
    Ok(out)
}

impl AsRef<ControlGrid> for ControlGrid {
    fn as_ref(&self) -> &ControlGrid {
        self
    }
}

impl AsRef<ControlGrid> for BSplineSurface {
    fn as_ref(&self) -> &ControlGrid {
        self.grid()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{flat_grid, make_flat_surface};
    use approx::assert_abs_diff_eq;

    #[test]
    fn recon_examples() {
        let g = flat_grid(15, 15, 300.0, 300.0).unwrap();
        assert_eq!(
            loss_recon(std::slice::from_ref(&g), std::slice::from_ref(&g)).unwrap(),
            0.0
        );
        let mut p = g.clone();
        p.points[17].x += 1.0;
        assert_abs_diff_eq!(
            loss_recon(&[p], std::slice::from_ref(&g)).unwrap(),
            1.0 / 225.0,
            epsilon = 1e-15
        );
        let small = flat_grid(4, 5, 1.0, 1.0).unwrap();
        assert!(matches!(
            loss_recon(&[small], std::slice::from_ref(&g)),
            Err(Error::InvalidArgument(_))
        ));
        assert!(loss_recon(&[g.clone(), g.clone()], &[g]).is_err());
    }

    #[test]
    fn overlap_term_signs() {
        let x1 = Sensor::new(0.0, 0.0, 1.0, 1.0);
        let x2 = Sensor::new(0.0, 1.0, 1.0, 0.0);
        let (f1, f2) = overlap_terms(&x1, &x2);
        assert!(f1 > 0.0 && f2 > 0.0);

        let p1 = Sensor::new(0.0, 0.0, 1.0, 0.0);
        let p2 = Sensor::new(0.0, 1.0, 1.0, 1.0);
        let (f1, f2) = overlap_terms(&p1, &p2);
        assert!(f1 < 0.0 || f2 < 0.0);

        // s2 starts on s1
        let t = Sensor::new(0.5, 0.0, 0.5, 1.0);
        let (_, f2) = overlap_terms(&p1, &t);
        assert_eq!(f2, 0.0);
    }

    #[test]
    fn overlap_loss_values() {
        let x1 = Sensor::new(0.0, 0.0, 1.0, 1.0);
        let x2 = Sensor::new(0.0, 1.0, 1.0, 0.0);
        assert!(loss_overlap(&x1, &x2, 10.0) > 0.9);
        let p1 = Sensor::new(0.0, 0.0, 1.0, 0.0);
        let p2 = Sensor::new(0.0, 1.0, 1.0, 1.0);
        assert!(loss_overlap(&p1, &p2, 10.0) < 0.1);
        // shared endpoint: both side tests vanish
        let a = Sensor::new(0.2, 0.2, 0.6, 0.3);
        let b = Sensor::new(0.6, 0.3, 0.9, 0.9);
        assert_eq!(overlap_terms(&a, &b), (0.0, 0.0));
        assert_eq!(loss_overlap(&a, &b, 10.0), 0.25);
    }

    #[test]
    fn closed_intersection_cases() {
        let a = Sensor::new(0.0, 0.0, 1.0, 0.0);
        assert!(segments_intersect(&a, &Sensor::new(0.5, 0.0, 0.5, 1.0)));
        assert!(segments_intersect(&a, &Sensor::new(0.5, 0.0, 2.0, 0.0)));
        assert!(!segments_intersect(&a, &Sensor::new(1.5, 0.0, 2.0, 0.0)));
        assert!(!segments_intersect(&a, &Sensor::new(0.0, 0.1, 1.0, 0.1)));
    }

    #[test]
    fn soft_min_identical_distances() {
        // two parallel lines at constant separation d in the flat plane
        let flat = make_flat_surface(6, 6, 100.0, 100.0).unwrap();
        let s1 = Sensor::new(0.2, 0.3, 0.2, 0.3);
        let s2 = Sensor::new(0.25, 0.3, 0.25, 0.3);
        let k = 8;
        let beta = 2.0;
        let d = soft_min_distance(&flat, &s1, &s2, k, beta).unwrap();
        assert_abs_diff_eq!(d, 5.0 - ((k * k) as f64).ln() / beta, epsilon = 1e-12);
    }

    #[test]
    fn soft_min_coincident_point() {
        let flat = make_flat_surface(6, 6, 300.0, 300.0).unwrap();
        let s1 = Sensor::new(0.1, 0.1, 0.5, 0.5);
        let s2 = Sensor::new(0.5, 0.5, 0.9, 0.1);
        let beta = 100.0;
        let d = soft_min_distance(&flat, &s1, &s2, 16, beta).unwrap();
        assert!(d <= 1e-12 && d >= -(256f64).ln() / beta, "{d}");
    }

    #[test]
    fn penalties() {
        assert_eq!(min_space_penalty(10.0, 10.0), 0.0);
        assert_eq!(min_space_penalty(0.0, 10.0), 100.0);
        assert_eq!(min_space_penalty(5.0, 10.0), 25.0);
        assert_eq!(min_space_penalty(12.0, 10.0), 0.0);
        assert_eq!(min_length_penalty(25.0, 50.0), 625.0);
    }

    fn bar_layout(specs: &[(f64, f64)], logits: Vec<f64>) -> SensorLayout {
        // horizontal sensors at v given by .0 spanning .1 of the unit width
        let sensors = specs
            .iter()
            .map(|&(v, w)| Sensor::new(0.1, v, 0.1 + w, v))
            .collect();
        SensorLayout::new(sensors, logits, 10.0).unwrap()
    }

    #[test]
    fn length_losses() {
        let flat = make_flat_surface(8, 8, 100.0, 100.0).unwrap();
        // 100 mm and 50 mm sensors with occupancy 1 and 0.5
        let sensors = vec![
            Sensor::new(0.0, 0.2, 1.0, 0.2),
            Sensor::new(0.1, 0.6, 0.6, 0.6),
        ];
        let layout = SensorLayout::new(sensors.clone(), vec![1e3, 0.0], 1e6).unwrap();
        assert_eq!(layout.occupancy(), vec![1.0, 0.5]);
        assert_abs_diff_eq!(
            loss_total_length(&flat, &layout, 8).unwrap(),
            125.0,
            epsilon = 1e-9
        );

        let off = SensorLayout::new(sensors, vec![-1e3, -1e3], 1e6).unwrap();
        assert_eq!(loss_total_length(&flat, &off, 8).unwrap(), 0.0);

        let cfg = LossConfig {
            samples: 8,
            ..LossConfig::default()
        };
        let long = bar_layout(&[(0.2, 0.8), (0.6, 0.6)], vec![0.0, 0.0]);
        assert_eq!(loss_min_length(&flat, &long, &cfg).unwrap(), 0.0);

        let short =
            SensorLayout::new(vec![Sensor::new(0.1, 0.5, 0.35, 0.5)], vec![1e3], 1e6).unwrap();
        assert_abs_diff_eq!(
            loss_min_length(&flat, &short, &cfg).unwrap(),
            625.0,
            epsilon = 1e-8
        );
        let half =
            SensorLayout::new(vec![Sensor::new(0.1, 0.5, 0.35, 0.5)], vec![0.0], 10.0).unwrap();
        assert_abs_diff_eq!(
            loss_min_length(&flat, &half, &cfg).unwrap(),
            312.5,
            epsilon = 1e-8
        );
    }

    #[test]
    fn total_with_zero_weights_is_recon() {
        let truth = vec![make_flat_surface(6, 6, 100.0, 100.0).unwrap()];
        let mut pred = truth[0].grid().clone();
        pred.points[3].z += 2.0;
        let layout = bar_layout(&[(0.2, 0.8), (0.6, 0.4), (0.4, 0.3)], vec![0.3, -0.2, 1.0]);
        let cfg = LossConfig {
            w_t: 0.0,
            w_m: 0.0,
            w_p: 0.0,
            w_s: 0.0,
            ..LossConfig::default()
        };
        let b = loss_total(&truth, &[pred], &layout, &cfg).unwrap();
        assert_eq!(b.total, b.recon);
        assert_abs_diff_eq!(b.recon, 4.0 / 36.0, epsilon = 1e-14);
    }

    #[test]
    fn single_sensor_has_no_pair_terms() {
        let truth = vec![make_flat_surface(6, 6, 100.0, 100.0).unwrap()];
        let layout = bar_layout(&[(0.2, 0.8)], vec![2.0]);
        let b = loss_total(
            &truth,
            &[truth[0].grid().clone()],
            &layout,
            &LossConfig::default(),
        )
        .unwrap();
        assert_eq!(b.overlap, 0.0);
        assert_eq!(b.min_space, 0.0);
    }

    #[test]
    fn pairs_enumeration() {
        assert_eq!(sensor_pairs(3), vec![(0, 1), (0, 2), (1, 2)]);
        assert!(sensor_pairs(1).is_empty());
        assert_eq!(sensor_pairs(20).len(), 190);
    }
}
