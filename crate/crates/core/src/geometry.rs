//! Clamped cubic B-spline surfaces on the unit parameter square.
//!
//! Evaluation uses local support: a point only reads the 4x4 window of control
//! points whose basis functions are nonzero in the containing knot span.

use std::ops::{Add, AddAssign, Mul, Neg, Sub};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DEGREE: usize = 3;
const ORDER: usize = DEGREE + 1;

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(from = "[f64; 3]", into = "[f64; 3]")]
pub struct Vec3 {
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

impl Vec3 {
    pub const ZERO: Vec3 = Vec3::new(0.0, 0.0, 0.0);

    pub const fn new(x: f64, y: f64, z: f64) -> Self {
        Vec3 { x, y, z }
    }

    pub fn dot(self, other: Vec3) -> f64 {
        self.x * other.x + self.y * other.y + self.z * other.z
    }

    pub fn norm_squared(self) -> f64 {
        self.dot(self)
    }

    pub fn norm(self) -> f64 {
        self.norm_squared().sqrt()
    }

    pub fn is_finite(self) -> bool {
        self.x.is_finite() && self.y.is_finite() && self.z.is_finite()
    }
}

impl From<[f64; 3]> for Vec3 {
    fn from([x, y, z]: [f64; 3]) -> Self {
        Vec3 { x, y, z }
    }
}

impl From<Vec3> for [f64; 3] {
    fn from(p: Vec3) -> Self {
        [p.x, p.y, p.z]
    }
}

impl Add for Vec3 {
    type Output = Vec3;
    fn add(self, o: Vec3) -> Vec3 {
        Vec3::new(self.x + o.x, self.y + o.y, self.z + o.z)
    }
}

impl AddAssign for Vec3 {
    fn add_assign(&mut self, o: Vec3) {
        self.x += o.x;
        self.y += o.y;
        self.z += o.z;
    }
}

impl Sub for Vec3 {
    type Output = Vec3;
    fn sub(self, o: Vec3) -> Vec3 {
        Vec3::new(self.x - o.x, self.y - o.y, self.z - o.z)
    }
}

impl Neg for Vec3 {
    type Output = Vec3;
    fn neg(self) -> Vec3 {
        Vec3::new(-self.x, -self.y, -self.z)
    }
}

impl Mul<f64> for Vec3 {
    type Output = Vec3;
    fn mul(self, s: f64) -> Vec3 {
        Vec3::new(self.x * s, self.y * s, self.z * s)
    }
}

impl Mul<Vec3> for f64 {
    type Output = Vec3;
    fn mul(self, p: Vec3) -> Vec3 {
        p * self
    }
}

/// Nondecreasing knot sequence of a clamped cubic B-spline on [0, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct KnotVector {
    values: Vec<f64>,
}

impl KnotVector {
    /// Clamped uniform knots for `count` basis functions: four zeros,
    /// `count - 4` evenly spaced interior knots, four ones.
    pub fn clamped_uniform(count: usize) -> Result<Self> {
        if count < ORDER {
            return Err(Error::invalid(format!(
                "a cubic B-spline needs at least {ORDER} control points, got {count}"
            )));
        }
        let segments = count - DEGREE;
        let mut values = Vec::with_capacity(count + ORDER);
        values.extend([0.0; DEGREE]);
        for k in 0..=segments {
            values.push(k as f64 / segments as f64);
        }
        values.extend([1.0; DEGREE]);
        Ok(KnotVector { values })
    }

    /// Validates an explicit clamped knot sequence.
    pub fn from_values(values: Vec<f64>) -> Result<Self> {
        if values.len() < 2 * ORDER {
            return Err(Error::invalid("knot vector too short for a cubic basis"));
        }
        if values.windows(2).any(|w| !(w[0] <= w[1])) {
            return Err(Error::invalid("knot vector must be nondecreasing"));
        }
        let n = values.len();
        if values[..ORDER].iter().any(|&k| k != 0.0)
            || values[n - ORDER..].iter().any(|&k| k != 1.0)
        {
            return Err(Error::invalid("knot vector must be clamped to [0, 1]"));
        }
        Ok(KnotVector { values })
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn basis_count(&self) -> usize {
        self.values.len() - ORDER
    }

    /// Greville abscissa of basis function `i`: the mean of its three interior knots.
    pub fn greville(&self, i: usize) -> f64 {
        (self.values[i + 1] + self.values[i + 2] + self.values[i + 3]) / 3.0
    }

    /// Index `s` of the knot span containing `u`, with `knots[s] <= u < knots[s+1]`.
    /// `u = 1` maps to the last nonempty span (left limit).
    fn span(&self, u: f64) -> usize {
        let last = self.basis_count() - 1;
        if u >= self.values[last + 1] {
            return last;
        }
        // first index in [DEGREE, last] whose successor knot exceeds u
        let (mut lo, mut hi) = (DEGREE, last);
        while lo < hi {
            let mid = (lo + hi).div_ceil(2);
            if self.values[mid] <= u {
                lo = mid;
            } else {
                hi = mid - 1;
            }
        }
        lo
    }

    /// The four nonzero cubic basis values and first derivatives at `u`.
    /// Entry `r` belongs to basis index `first + r`.
    pub(crate) fn local_basis(&self, u: f64) -> LocalBasis {
        let k = &self.values;
        let s = self.span(u);

        // quadratic basis on span s: indices s-2, s-1, s
        let mut quad = [0.0; 3];
        {
            let mut left = [0.0; 3];
            let mut right = [0.0; 3];
            quad[0] = 1.0;
            for j in 1..=2 {
                left[j] = u - k[s + 1 - j];
                right[j] = k[s + j] - u;
                let mut saved = 0.0;
                for r in 0..j {
                    let denom = right[r + 1] + left[j - r];
                    let temp = if denom != 0.0 { quad[r] / denom } else { 0.0 };
                    quad[r] = saved + right[r + 1] * temp;
                    saved = left[j - r] * temp;
                }
                quad[j] = saved;
            }
        }
        let quad_at = |i: usize| -> f64 {
            if i + 2 >= s && i <= s {
                quad[i + 2 - s]
            } else {
                0.0
            }
        };

        let first = s - DEGREE;
        let mut values = [0.0; 4];
        let mut derivs = [0.0; 4];
        for (r, (val, der)) in values.iter_mut().zip(derivs.iter_mut()).enumerate() {
            let i = first + r;
            let (a, b) = (quad_at(i), quad_at(i + 1));
            let d0 = k[i + 3] - k[i];
            let d1 = k[i + 4] - k[i + 1];
            let (mut v, mut d) = (0.0, 0.0);
            if d0 != 0.0 {
                v += (u - k[i]) / d0 * a;
                d += 3.0 / d0 * a;
            }
            if d1 != 0.0 {
                v += (k[i + 4] - u) / d1 * b;
                d -= 3.0 / d1 * b;
            }
            *val = v;
            *der = d;
        }
        LocalBasis {
            first,
            values,
            derivs,
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct LocalBasis {
    pub first: usize,
    pub values: [f64; 4],
    pub derivs: [f64; 4],
}

pub fn make_clamped_knots(count: usize) -> Result<KnotVector> {
    KnotVector::clamped_uniform(count)
}

fn check_index(knots: &KnotVector, i: usize) -> Result<()> {
    if i >= knots.basis_count() {
        return Err(Error::invalid(format!(
            "basis index {i} out of range for {} basis functions",
            knots.basis_count()
        )));
    }
    Ok(())
}

fn check_param(u: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&u) {
        return Err(Error::Domain { u, v: f64::NAN });
    }
    Ok(())
}

/// Value of cubic basis function `i` at `u`.
pub fn basis_value(knots: &KnotVector, i: usize, u: f64) -> Result<f64> {
    check_index(knots, i)?;
    check_param(u)?;
    let b = knots.local_basis(u);
    Ok(match i.checked_sub(b.first) {
        Some(r) if r < 4 => b.values[r],
        _ => 0.0,
    })
}

/// First derivative of cubic basis function `i` at `u`.
pub fn basis_derivative(knots: &KnotVector, i: usize, u: f64) -> Result<f64> {
    check_index(knots, i)?;
    check_param(u)?;
    let b = knots.local_basis(u);
    Ok(match i.checked_sub(b.first) {
        Some(r) if r < 4 => b.derivs[r],
        _ => 0.0,
    })
}

/// An m x n grid of control points, row-major with `i` (the u direction)
/// as the slow index.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ControlGrid {
    pub m: usize,
    pub n: usize,
    #[serde(rename = "control_points")]
    pub points: Vec<Vec3>,
}

impl ControlGrid {
    pub fn new(m: usize, n: usize, points: Vec<Vec3>) -> Result<Self> {
        if points.len() != m * n {
            return Err(Error::invalid(format!(
                "control grid {m}x{n} needs {} points, got {}",
                m * n,
                points.len()
            )));
        }
        Ok(ControlGrid { m, n, points })
    }

    pub fn get(&self, i: usize, j: usize) -> Vec3 {
        self.points[i * self.n + j]
    }

    pub fn same_schema(&self, other: &ControlGrid) -> bool {
        self.m == other.m && self.n == other.n
    }
}

/// Point and first partial derivatives of a surface at one parameter pair.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SurfaceSample {
    pub point: Vec3,
    pub du: Vec3,
    pub dv: Vec3,
}

/// Clamped cubic tensor-product B-spline surface. Knots are always clamped
/// uniform and rebuilt from the grid dimensions.
#[derive(Debug, Clone, PartialEq)]
pub struct BSplineSurface {
    grid: ControlGrid,
    knots_u: KnotVector,
    knots_v: KnotVector,
}

impl BSplineSurface {
    pub fn new(grid: ControlGrid) -> Result<Self> {
        if grid.m < ORDER || grid.n < ORDER {
            return Err(Error::invalid(format!(
                "surface grid must be at least 4x4, got {}x{}",
                grid.m, grid.n
            )));
        }
        let knots_u = KnotVector::clamped_uniform(grid.m)?;
        let knots_v = KnotVector::clamped_uniform(grid.n)?;
        Ok(BSplineSurface {
            grid,
            knots_u,
            knots_v,
        })
    }

    pub fn grid(&self) -> &ControlGrid {
        &self.grid
    }

    pub fn into_grid(self) -> ControlGrid {
        self.grid
    }

    pub fn m(&self) -> usize {
        self.grid.m
    }

    pub fn n(&self) -> usize {
        self.grid.n
    }

    pub fn knots_u(&self) -> &KnotVector {
        &self.knots_u
    }

    pub fn knots_v(&self) -> &KnotVector {
        &self.knots_v
    }

    fn check(u: f64, v: f64) -> Result<()> {
        if (0.0..=1.0).contains(&u) && (0.0..=1.0).contains(&v) {
            Ok(())
        } else {
            Err(Error::Domain { u, v })
        }
    }

    pub fn point(&self, u: f64, v: f64) -> Result<Vec3> {
        Self::check(u, v)?;
        let bu = self.knots_u.local_basis(u);
        let bv = self.knots_v.local_basis(v);
        let mut p = Vec3::ZERO;
        for a in 0..4 {
            let row = (bu.first + a) * self.grid.n + bv.first;
            let mut acc = Vec3::ZERO;
            for b in 0..4 {
                acc += bv.values[b] * self.grid.points[row + b];
            }
            p += bu.values[a] * acc;
        }
        Ok(p)
    }

    pub fn partials(&self, u: f64, v: f64) -> Result<(Vec3, Vec3)> {
        let s = self.sample(u, v)?;
        Ok((s.du, s.dv))
    }

    /// Point and both partials from one basis evaluation.
    pub fn sample(&self, u: f64, v: f64) -> Result<SurfaceSample> {
        Self::check(u, v)?;
        let bu = self.knots_u.local_basis(u);
        let bv = self.knots_v.local_basis(v);
        let (mut p, mut pu, mut pv) = (Vec3::ZERO, Vec3::ZERO, Vec3::ZERO);
        for a in 0..4 {
            let row = (bu.first + a) * self.grid.n + bv.first;
            let (mut acc, mut acc_dv) = (Vec3::ZERO, Vec3::ZERO);
            for b in 0..4 {
                let cp = self.grid.points[row + b];
                acc += bv.values[b] * cp;
                acc_dv += bv.derivs[b] * cp;
            }
            p += bu.values[a] * acc;
            pu += bu.derivs[a] * acc;
            pv += bu.values[a] * acc_dv;
        }
        Ok(SurfaceSample {
            point: p,
            du: pu,
            dv: pv,
        })
    }
}

pub fn surface_point(surface: &BSplineSurface, u: f64, v: f64) -> Result<Vec3> {
    surface.point(u, v)
}

pub fn surface_partials(surface: &BSplineSurface, u: f64, v: f64) -> Result<(Vec3, Vec3)> {
    surface.partials(u, v)
}

/// Control grid with points at the Greville abscissae, scaled to `width` x
/// `height` mm in the z = 0 plane. The resulting surface is exactly
/// `S(u, v) = (width * u, height * v, 0)`.
pub fn flat_grid(m: usize, n: usize, width: f64, height: f64) -> Result<ControlGrid> {
    let ku = KnotVector::clamped_uniform(m)?;
    let kv = KnotVector::clamped_uniform(n)?;
    let mut points = Vec::with_capacity(m * n);
    for i in 0..m {
        let gu = ku.greville(i);
        for j in 0..n {
            points.push(Vec3::new(width * gu, height * kv.greville(j), 0.0));
        }
    }
    ControlGrid::new(m, n, points)
}

pub fn make_flat_surface(m: usize, n: usize, width: f64, height: f64) -> Result<BSplineSurface> {
    BSplineSurface::new(flat_grid(m, n, width, height)?)
}

/// On-disk form of a surface; knots are never stored.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SurfaceFile {
    pub m: usize,
    pub n: usize,
    pub control_points: Vec<Vec3>,
}

impl From<&BSplineSurface> for SurfaceFile {
    fn from(s: &BSplineSurface) -> Self {
        SurfaceFile {
            m: s.m(),
            n: s.n(),
            control_points: s.grid.points.clone(),
        }
    }
}

impl TryFrom<SurfaceFile> for BSplineSurface {
    type Error = Error;
    fn try_from(f: SurfaceFile) -> Result<Self> {
        BSplineSurface::new(ControlGrid::new(f.m, f.n, f.control_points)?)
    }
}
