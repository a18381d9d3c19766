//! Synthetic deformation datasets: generation, splitting and JSON persistence.

use std::f64::consts::PI;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{flat_grid, BSplineSurface, ControlGrid, KnotVector, Vec3};
use crate::predictor::BaseShape;
use crate::rng::{substream, Stream};

pub const FORMAT_VERSION: u64 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GenConfig {
    pub m: usize,
    pub n: usize,
    pub width_mm: f64,
    pub height_mm: f64,
    pub count: usize,
    pub modes: usize,
    pub amplitude_mm: f64,
    pub seed: u64,
}

impl Default for GenConfig {
    fn default() -> Self {
        GenConfig {
            m: 15,
            n: 15,
            width_mm: 300.0,
            height_mm: 300.0,
            count: 2000,
            modes: 6,
            amplitude_mm: 30.0,
            seed: 7,
        }
    }
}

impl GenConfig {
    pub fn validate(&self) -> Result<()> {
        if self.m < 4 || self.n < 4 {
            return Err(Error::invalid(format!(
                "control grid must be at least 4x4, got {}x{}",
                self.m, self.n
            )));
        }
        if self.count == 0 {
            return Err(Error::invalid("count must be at least 1"));
        }
        if !(self.amplitude_mm >= 0.0) || !self.amplitude_mm.is_finite() {
            return Err(Error::invalid("amplitude must be finite and nonnegative"));
        }
        if !(self.width_mm > 0.0 && self.height_mm > 0.0)
            || !self.width_mm.is_finite()
            || !self.height_mm.is_finite()
        {
            return Err(Error::invalid("extent must be finite and positive"));
        }
        Ok(())
    }
}

/// Which part of a split a dataset is, and the source indices it holds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitRecord {
    pub part: String,
    pub fraction: f64,
    pub seed: u64,
    pub indices: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub generator: GenConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub split: Option<SplitRecord>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ShapeDataset {
    pub base: BaseShape,
    pub shapes: Vec<ControlGrid>,
    pub width_mm: f64,
    pub height_mm: f64,
    pub provenance: Provenance,
}

impl ShapeDataset {
    pub fn m(&self) -> usize {
        self.base.m
    }

    pub fn n(&self) -> usize {
        self.base.n
    }

    pub fn len(&self) -> usize {
        self.shapes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.shapes.is_empty()
    }

    pub fn base_surface(&self) -> Result<BSplineSurface> {
        BSplineSurface::new(self.base.clone())
    }

    pub fn surfaces(&self) -> Result<Vec<BSplineSurface>> {
        self.shapes
            .iter()
            .map(|g| BSplineSurface::new(g.clone()))
            .collect()
    }

    /// Subset by index, keeping base and provenance.
    pub fn select(&self, indices: &[usize]) -> ShapeDataset {
        ShapeDataset {
            base: self.base.clone(),
            shapes: indices.iter().map(|&i| self.shapes[i].clone()).collect(),
            width_mm: self.width_mm,
            height_mm: self.height_mm,
            provenance: self.provenance.clone(),
        }
    }

    fn check(&self) -> Result<()> {
        for (k, s) in self.shapes.iter().enumerate() {
            if !s.same_schema(&self.base) {
                return Err(Error::invalid(format!(
                    "shape {k} is {}x{} but the base is {}x{}",
                    s.m, s.n, self.base.m, self.base.n
                )));
            }
        }
        Ok(())
    }
}

struct Mode {
    p: f64,
    q: f64,
    phi: f64,
    psi: f64,
    dir: Vec3,
}

fn draw_direction<R: Rng>(rng: &mut R) -> Vec3 {
    let z: f64 = rng.gen_range(0.8..=1.0);
    let theta: f64 = rng.gen_range(0.0..2.0 * PI);
    let r = (1.0 - z * z).max(0.0).sqrt();
    Vec3::new(r * theta.cos(), r * theta.sin(), z)
}

/// Smooth random deformations of a flat Greville sheet. Mode frequencies,
/// phases and directions are drawn once per dataset; each shape draws its own
/// mode amplitudes.
pub fn generate_synthetic_dataset(cfg: &GenConfig) -> Result<ShapeDataset> {
    cfg.validate()?;
    let base = flat_grid(cfg.m, cfg.n, cfg.width_mm, cfg.height_mm)?;
    let ku = KnotVector::clamped_uniform(cfg.m)?;
    let kv = KnotVector::clamped_uniform(cfg.n)?;
    let gu: Vec<f64> = (0..cfg.m).map(|i| ku.greville(i)).collect();
    let gv: Vec<f64> = (0..cfg.n).map(|j| kv.greville(j)).collect();

    let mut rng = substream(cfg.seed, Stream::Generator);
    let modes: Vec<Mode> = (0..cfg.modes)
        .map(|_| Mode {
            p: rng.gen_range(1..=3) as f64,
            q: rng.gen_range(1..=3) as f64,
            phi: rng.gen_range(0.0..2.0 * PI),
            psi: rng.gen_range(0.0..2.0 * PI),
            dir: draw_direction(&mut rng),
        })
        .collect();
    // fields[r][i * n + j]: mode r evaluated at control point (i, j)
    let fields: Vec<Vec<Vec3>> = modes
        .iter()
        .map(|md| {
            let mut f = Vec::with_capacity(cfg.m * cfg.n);
            for &u in &gu {
                for &v in &gv {
                    let s = (PI * md.p * u + md.phi).sin() * (PI * md.q * v + md.psi).sin();
                    f.push(md.dir * s);
                }
            }
            f
        })
        .collect();

    let mut shapes = Vec::with_capacity(cfg.count);
    for _ in 0..cfg.count {
        let amps: Vec<f64> = (0..cfg.modes)
            .map(|_| {
                if cfg.amplitude_mm > 0.0 {
                    rng.gen_range(-cfg.amplitude_mm..=cfg.amplitude_mm)
                } else {
                    0.0
                }
            })
            .collect();
        let points = base
            .points
            .iter()
            .enumerate()
            .map(|(k, &p0)| {
                let mut p = p0;
                for (a, f) in amps.iter().zip(&fields) {
                    p += f[k] * *a;
                }
                p
            })
            .collect();
        shapes.push(ControlGrid::new(cfg.m, cfg.n, points)?);
    }
    Ok(ShapeDataset {
        base,
        shapes,
        width_mm: cfg.width_mm,
        height_mm: cfg.height_mm,
        provenance: Provenance {
            generator: *cfg,
            split: None,
        },
    })
}

/// Seeded permutation split; the first `ceil(fraction * N)` shapes go to
/// train.
pub fn split_dataset(
    ds: &ShapeDataset,
    train_fraction: f64,
    seed: u64,
) -> Result<(ShapeDataset, ShapeDataset)> {
    if !(train_fraction > 0.0 && train_fraction < 1.0) {
        return Err(Error::invalid(format!(
            "train fraction must lie in (0, 1), got {train_fraction}"
        )));
    }
    let mut order: Vec<usize> = (0..ds.len()).collect();
    order.shuffle(&mut substream(seed, Stream::Split));
    let cut = ((train_fraction * ds.len() as f64).ceil() as usize).min(ds.len());
    let part = |name: &str, idx: &[usize]| {
        let mut out = ds.select(idx);
        out.provenance.split = Some(SplitRecord {
            part: name.to_string(),
            fraction: train_fraction,
            seed,
            indices: idx.to_vec(),
        });
        out
    };
    Ok((part("train", &order[..cut]), part("test", &order[cut..])))
}

#[derive(Serialize, Deserialize)]
struct DatasetFile {
    format_version: u64,
    m: usize,
    n: usize,
    width_mm: f64,
    height_mm: f64,
    base: Vec<Vec3>,
    shapes: Vec<Vec<Vec3>>,
    provenance: Provenance,
}

pub fn dataset_to_json(ds: &ShapeDataset) -> Result<String> {
    let file = DatasetFile {
        format_version: FORMAT_VERSION,
        m: ds.m(),
        n: ds.n(),
        width_mm: ds.width_mm,
        height_mm: ds.height_mm,
        base: ds.base.points.clone(),
        shapes: ds.shapes.iter().map(|s| s.points.clone()).collect(),
        provenance: ds.provenance.clone(),
    };
    serde_json::to_string(&file).map_err(|e| Error::Numeric(e.to_string()))
}

pub fn dataset_from_json(text: &str, context: &str) -> Result<ShapeDataset> {
    let value: serde_json::Value =
        serde_json::from_str(text).map_err(|e| Error::parse(context, &e))?;
    let found = value
        .get("format_version")
        .and_then(serde_json::Value::as_u64)
        .ok_or_else(|| Error::Parse {
            context: context.to_string(),
            line: 1,
            column: 1,
            message: "missing integer field `format_version`".into(),
        })?;
    if found != FORMAT_VERSION {
        return Err(Error::UnsupportedVersion {
            found,
            expected: FORMAT_VERSION,
        });
    }
    let file: DatasetFile = serde_json::from_value(value).map_err(|e| Error::Parse {
        context: context.to_string(),
        line: 0,
        column: 0,
        message: e.to_string(),
    })?;
    let base = ControlGrid::new(file.m, file.n, file.base)?;
    let shapes = file
        .shapes
        .into_iter()
        .map(|p| ControlGrid::new(file.m, file.n, p))
        .collect::<Result<Vec<_>>>()?;
    let ds = ShapeDataset {
        base,
        shapes,
        width_mm: file.width_mm,
        height_mm: file.height_mm,
        provenance: file.provenance,
    };
    ds.check()?;
    Ok(ds)
}

pub fn save_dataset(ds: &ShapeDataset, path: &Path) -> Result<()> {
    let text = dataset_to_json(ds)?;
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn load_dataset(path: &Path) -> Result<ShapeDataset> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    dataset_from_json(&text, &path.display().to_string())
}

/// Loads a dataset and checks it against an expected `(m, n)` schema.
pub fn load_dataset_for(path: &Path, m: usize, n: usize) -> Result<ShapeDataset> {
    let ds = load_dataset(path)?;
    if ds.m() != m || ds.n() != n {
        return Err(Error::invalid(format!(
            "dataset {} is {}x{}, expected {m}x{n}",
            path.display(),
            ds.m(),
            ds.n()
        )));
    }
    Ok(ds)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(seed: u64) -> GenConfig {
        GenConfig {
            m: 6,
            n: 5,
            count: 40,
            seed,
            ..GenConfig::default()
        }
    }

    #[test]
    fn zero_amplitude_gives_base() {
        let ds = generate_synthetic_dataset(&GenConfig {
            amplitude_mm: 0.0,
            ..small(1)
        })
        .unwrap();
        assert!(ds.shapes.iter().all(|s| *s == ds.base));
    }

    #[test]
    fn deterministic() {
        let a = generate_synthetic_dataset(&small(3)).unwrap();
        let b = generate_synthetic_dataset(&small(3)).unwrap();
        let c = generate_synthetic_dataset(&small(4)).unwrap();
        assert_eq!(a, b);
        assert_ne!(a.shapes, c.shapes);
    }

    #[test]
    fn split_sizes_and_disjointness() {
        let ds = generate_synthetic_dataset(&small(2)).unwrap();
        let (tr, te) = split_dataset(&ds, 0.8, 9).unwrap();
        assert_eq!((tr.len(), te.len()), (32, 8));
        let mut all: Vec<usize> = tr.provenance.split.as_ref().unwrap().indices.clone();
        all.extend(&te.provenance.split.as_ref().unwrap().indices);
        all.sort();
        assert_eq!(all, (0..40).collect::<Vec<_>>());
        assert!(split_dataset(&ds, 1.0, 9).is_err());
        assert!(split_dataset(&ds, 0.0, 9).is_err());
    }

    #[test]
    fn json_round_trip_and_errors() {
        let ds = generate_synthetic_dataset(&small(5)).unwrap();
        let text = dataset_to_json(&ds).unwrap();
        let back = dataset_from_json(&text, "mem").unwrap();
        assert_eq!(back, ds);
        let truncated = &text[..text.len() / 2];
        assert!(matches!(
            dataset_from_json(truncated, "mem"),
            Err(Error::Parse { .. })
        ));
        let bumped = text.replacen("\"format_version\":1", "\"format_version\":2", 1);
        assert!(matches!(
            dataset_from_json(&bumped, "mem"),
            Err(Error::UnsupportedVersion { found: 2, .. })
        ));
    }
}
