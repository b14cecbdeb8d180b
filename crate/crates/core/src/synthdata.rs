//! Synthetic watertight shapes with analytic signed distance.
//!
//! Shapes are unions of spheres, axis-aligned boxes and tori inside the unit
//! cube `[-0.5, 0.5]^3`. The signed distance is negative inside, and a point
//! is occupied iff its distance is `<= 0`.

use crate::geometry::{self, GeometryError, Point, PointCloud};
use crate::rng::RngStream;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::f64::consts::{PI, TAU};
use std::fmt;
use std::io::{Read, Write};
use std::path::Path;
use std::str::FromStr;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("degenerate shape: {0}")]
    Degenerate(String),
    #[error("invalid dataset: {0}")]
    Format(String),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, SynthError>;

/// Clearance kept between every shape and the unit cube boundary.
pub const MARGIN: f64 = 0.05;

/// Offsets of the two near-surface halves.
pub const NEAR_SIGMAS: [f64; 2] = [0.01, 0.05];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Primitive {
    Sphere { center: Point, radius: f64 },
    Box { center: Point, half: [f64; 3] },
    /// Ring around the coordinate axis `axis` (0, 1 or 2).
    Torus { center: Point, major: f64, minor: f64, axis: usize },
}

/// Splits `p` into its component along `axis` and the two others.
fn axis_split(p: Point, axis: usize) -> (f64, f64, f64) {
    (p[axis], p[(axis + 1) % 3], p[(axis + 2) % 3])
}

fn axis_join(h: f64, a: f64, b: f64, axis: usize) -> Point {
    let mut p = [0.0; 3];
    p[axis] = h;
    p[(axis + 1) % 3] = a;
    p[(axis + 2) % 3] = b;
    p
}

impl Primitive {
    pub fn sdf(&self, p: Point) -> f64 {
        match *self {
            Primitive::Sphere { center, radius } => geometry::norm(geometry::sub(p, center)) - radius,
            Primitive::Box { center, half } => {
                let q: Vec<f64> = (0..3).map(|i| (p[i] - center[i]).abs() - half[i]).collect();
                let outside = q.iter().map(|v| v.max(0.0).powi(2)).sum::<f64>().sqrt();
                let inside = q[0].max(q[1]).max(q[2]).min(0.0);
                outside + inside
            }
            Primitive::Torus { center, major, minor, axis } => {
                let (h, a, b) = axis_split(geometry::sub(p, center), axis);
                let ring = (a * a + b * b).sqrt() - major;
                (ring * ring + h * h).sqrt() - minor
            }
        }
    }

    pub fn area(&self) -> f64 {
        match *self {
            Primitive::Sphere { radius, .. } => 4.0 * PI * radius * radius,
            Primitive::Box { half: [x, y, z], .. } => 8.0 * (x * y + y * z + x * z),
            Primitive::Torus { major, minor, .. } => 4.0 * PI * PI * major * minor,
        }
    }

    pub fn volume(&self) -> f64 {
        match *self {
            Primitive::Sphere { radius, .. } => 4.0 / 3.0 * PI * radius.powi(3),
            Primitive::Box { half: [x, y, z], .. } => 8.0 * x * y * z,
            Primitive::Torus { major, minor, .. } => 2.0 * PI * PI * major * minor * minor,
        }
    }

    /// Half-widths of the axis-aligned bounding box.
    pub fn extent(&self) -> [f64; 3] {
        match *self {
            Primitive::Sphere { radius, .. } => [radius; 3],
            Primitive::Box { half, .. } => half,
            Primitive::Torus { major, minor, axis, .. } => {
                let mut e = [major + minor; 3];
                e[axis] = minor;
                e
            }
        }
    }

    pub fn center(&self) -> Point {
        match *self {
            Primitive::Sphere { center, .. } | Primitive::Box { center, .. } | Primitive::Torus { center, .. } => center,
        }
    }

    /// One area-uniform point on the surface.
    pub fn sample_surface(&self, rng: &mut RngStream) -> Point {
        match *self {
            Primitive::Sphere { center, radius } => {
                let z = rng.uniform_range(-1.0, 1.0);
                let phi = TAU * rng.next_f64();
                let s = (1.0 - z * z).sqrt();
                geometry::add(center, [radius * s * phi.cos(), radius * s * phi.sin(), radius * z])
            }
            Primitive::Box { center, half } => {
                let faces = [half[1] * half[2], half[0] * half[2], half[0] * half[1]];
                let total: f64 = faces.iter().sum();
                let mut u = rng.next_f64() * total;
                let mut axis = 2;
                for (i, a) in faces.iter().enumerate() {
                    if u < *a {
                        axis = i;
                        break;
                    }
                    u -= a;
                }
                let sign = if rng.next_f64() < 0.5 { -1.0 } else { 1.0 };
                let mut p = [0.0; 3];
                for (i, v) in p.iter_mut().enumerate() {
                    *v = if i == axis {
                        sign * half[i]
                    } else {
                        rng.uniform_range(-half[i], half[i])
                    };
                }
                geometry::add(center, p)
            }
            Primitive::Torus { center, major, minor, axis } => loop {
                let u = TAU * rng.next_f64();
                let v = TAU * rng.next_f64();
                let w = rng.next_f64();
                if w * (major + minor) <= major + minor * v.cos() {
                    let r = major + minor * v.cos();
                    break geometry::add(center, axis_join(minor * v.sin(), r * u.cos(), r * u.sin(), axis));
                }
            },
        }
    }
}

/// Union of primitives.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SdfShape {
    pub parts: Vec<Primitive>,
}

impl SdfShape {
    pub fn new(parts: Vec<Primitive>) -> Result<Self> {
        if parts.is_empty() {
            return Err(SynthError::Degenerate("no primitives".into()));
        }
        Ok(Self { parts })
    }

    pub fn sdf(&self, p: Point) -> f64 {
        self.parts.iter().map(|s| s.sdf(p)).fold(f64::INFINITY, f64::min)
    }

    pub fn occupied(&self, p: Point) -> bool {
        self.sdf(p) <= 0.0
    }

    /// Checks that every part clears the cube boundary by [`MARGIN`].
    pub fn fits_unit_cube(&self) -> bool {
        self.parts.iter().all(|s| {
            let (c, e) = (s.center(), s.extent());
            (0..3).all(|i| c[i].abs() + e[i] <= 0.5 - MARGIN + 1e-12)
        })
    }

    pub fn translated(&self, t: Point) -> Self {
        let parts = self
            .parts
            .iter()
            .map(|s| {
                let mut s = s.clone();
                match &mut s {
                    Primitive::Sphere { center, .. } | Primitive::Box { center, .. } | Primitive::Torus { center, .. } => {
                        *center = geometry::add(*center, t)
                    }
                }
                s
            })
            .collect();
        Self { parts }
    }

    /// Monte-Carlo estimate of the occupied fraction of the unit cube.
    pub fn volume_fraction(&self, n: usize, rng: &mut RngStream) -> f64 {
        let hits = (0..n).filter(|_| self.occupied(uniform_point(rng))).count();
        hits as f64 / n.max(1) as f64
    }
}

fn uniform_point(rng: &mut RngStream) -> Point {
    [rng.next_f64() - 0.5, rng.next_f64() - 0.5, rng.next_f64() - 0.5]
}

/// `n` area-uniform samples of the union's boundary with isotropic Gaussian
/// noise of standard deviation `sigma`.
pub fn sample_surface(shape: &SdfShape, n: usize, sigma: f64, rng: &mut RngStream) -> Result<PointCloud> {
    if n == 0 {
        return Err(SynthError::Degenerate("no samples requested".into()));
    }
    let areas: Vec<f64> = shape.parts.iter().map(Primitive::area).collect();
    let total: f64 = areas.iter().sum();
    if !(total > 0.0 && total.is_finite()) {
        return Err(SynthError::Degenerate("zero surface area".into()));
    }
    let mut points = Vec::with_capacity(n);
    let mut tries = 0usize;
    while points.len() < n {
        tries += 1;
        if tries > 1000 * n + 10_000 {
            return Err(SynthError::Degenerate("surface is hidden inside other parts".into()));
        }
        let mut u = rng.next_f64() * total;
        let mut part = areas.len() - 1;
        for (i, a) in areas.iter().enumerate() {
            if u < *a {
                part = i;
                break;
            }
            u -= a;
        }
        let p = shape.parts[part].sample_surface(rng);
        let hidden = shape.parts.iter().enumerate().any(|(j, s)| j != part && s.sdf(p) < 0.0);
        if !hidden {
            points.push(p);
        }
    }
    if sigma > 0.0 {
        let noise = rng.gaussian(3 * n, sigma);
        for (p, e) in points.iter_mut().zip(noise.chunks_exact(3)) {
            *p = geometry::add(*p, [e[0], e[1], e[2]]);
        }
    }
    Ok(PointCloud::new(points)?)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum Regime {
    /// Surface samples displaced by Gaussian offsets.
    NearSurface,
    /// Uniform in the unit cube.
    Uniform,
}

impl fmt::Display for Regime {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Regime::NearSurface => "near_surface",
            Regime::Uniform => "uniform",
        })
    }
}

impl FromStr for Regime {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "near_surface" => Ok(Regime::NearSurface),
            "uniform" => Ok(Regime::Uniform),
            _ => Err(format!("unknown regime '{s}'")),
        }
    }
}

/// Labelled query points.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct OccupancySamples {
    pub points: Vec<Point>,
    /// 1 inside, 0 outside.
    pub labels: Vec<u8>,
}

impl OccupancySamples {
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn labelled(shape: &SdfShape, points: Vec<Point>) -> Self {
        let labels = points.iter().map(|p| shape.occupied(*p) as u8).collect();
        Self { points, labels }
    }

    /// Little-endian: `u32` count, `count * 3` `f32` coordinates, then
    /// `count` `u8` labels.
    pub fn write(&self, w: impl Write) -> Result<()> {
        let mut w = std::io::BufWriter::new(w);
        w.write_all(&(self.len() as u32).to_le_bytes())?;
        for p in &self.points {
            for v in p {
                w.write_all(&(*v as f32).to_le_bytes())?;
            }
        }
        w.write_all(&self.labels)?;
        w.flush()?;
        Ok(())
    }

    pub fn read(mut r: impl Read) -> Result<Self> {
        let mut head = [0u8; 4];
        r.read_exact(&mut head)?;
        let t = u32::from_le_bytes(head) as usize;
        let mut coords = vec![0u8; t * 12];
        r.read_exact(&mut coords)?;
        let mut labels = vec![0u8; t];
        r.read_exact(&mut labels)?;
        if labels.iter().any(|&l| l > 1) {
            return Err(SynthError::Format("labels must be 0 or 1".into()));
        }
        let vals: Vec<f64> = coords
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
            .collect();
        let points = vals.chunks_exact(3).map(|c| [c[0], c[1], c[2]]).collect();
        Ok(Self { points, labels })
    }
}

/// `t` labelled queries. Near-surface queries come in two halves offset by
/// the two [`NEAR_SIGMAS`].
pub fn sample_supervision(shape: &SdfShape, t: usize, regime: Regime, rng: &mut RngStream) -> Result<OccupancySamples> {
    let points = match regime {
        Regime::Uniform => (0..t).map(|_| uniform_point(rng)).collect(),
        Regime::NearSurface => {
            if t == 0 {
                return Ok(OccupancySamples::default());
            }
            let base = sample_surface(shape, t, 0.0, rng)?.points;
            base.into_iter()
                .enumerate()
                .map(|(i, p)| {
                    let s = NEAR_SIGMAS[(2 * i >= t) as usize];
                    let e = rng.gaussian(3, s);
                    geometry::add(p, [e[0], e[1], e[2]])
                })
                .collect()
        }
    };
    Ok(OccupancySamples::labelled(shape, points))
}

/// Random primitive with random pose inside the margin box, centered near
/// `anchor` when given.
fn random_primitive(rng: &mut RngStream, anchor: Option<Point>) -> Primitive {
    let kind = rng.below(3);
    let mut prim = match kind {
        0 => Primitive::Sphere {
            center: [0.0; 3],
            radius: rng.uniform_range(0.12, 0.3),
        },
        1 => Primitive::Box {
            center: [0.0; 3],
            half: [rng.uniform_range(0.08, 0.25), rng.uniform_range(0.08, 0.25), rng.uniform_range(0.08, 0.25)],
        },
        _ => Primitive::Torus {
            center: [0.0; 3],
            major: rng.uniform_range(0.15, 0.27),
            minor: rng.uniform_range(0.06, 0.11),
            axis: rng.below(3),
        },
    };
    let e = prim.extent();
    let mut c = [0.0; 3];
    for i in 0..3 {
        let lim = (0.5 - MARGIN - e[i]).max(0.0);
        let (lo, hi) = match anchor {
            Some(a) => ((a[i] - 0.2).max(-lim), (a[i] + 0.2).min(lim)),
            None => (-lim, lim),
        };
        c[i] = if lo < hi { rng.uniform_range(lo, hi) } else { lim.min(lo.max(-lim)) };
    }
    match &mut prim {
        Primitive::Sphere { center, .. } | Primitive::Box { center, .. } | Primitive::Torus { center, .. } => *center = c,
    }
    prim
}

/// Occupied-fraction window accepted by [`random_shape`].
pub const VOLUME_RANGE: (f64, f64) = (0.07, 0.5);

/// One to three overlapping primitives whose occupied fraction of the unit
/// cube lies in [`VOLUME_RANGE`].
pub fn random_shape(rng: &mut RngStream) -> SdfShape {
    loop {
        let n = 1 + rng.below(3);
        let mut parts = vec![random_primitive(rng, None)];
        while parts.len() < n {
            let a = parts[0].center();
            parts.push(random_primitive(rng, Some(a)));
        }
        let shape = SdfShape { parts };
        let v = shape.volume_fraction(4000, rng);
        if shape.fits_unit_cube() && (VOLUME_RANGE.0..=VOLUME_RANGE.1).contains(&v) {
            return shape;
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetSpec {
    pub count: usize,
    pub seed: u64,
    pub regime: Regime,
    /// Noise on the input clouds.
    pub noise_sigma: f64,
    /// Input points per shape.
    pub points: usize,
    /// Supervision queries per shape.
    pub supervision: usize,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        Self {
            count: 100,
            seed: 0,
            regime: Regime::NearSurface,
            noise_sigma: 0.0,
            points: 300,
            supervision: 10_000,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ShapeRecord {
    pub shape: SdfShape,
    pub cloud: PointCloud,
    pub supervision: OccupancySamples,
}

/// Generates one shape from its own stream.
pub fn make_record(spec: &DatasetSpec, index: usize) -> Result<ShapeRecord> {
    let mut rng = RngStream::new(spec.seed).split("dataset").split_index(index as u64);
    let shape = random_shape(&mut rng);
    let cloud = sample_surface(&shape, spec.points, spec.noise_sigma, &mut rng)?;
    let supervision = sample_supervision(&shape, spec.supervision, spec.regime, &mut rng)?;
    Ok(ShapeRecord { shape, cloud, supervision })
}

/// Shapes are generated in parallel from per-index streams, so the result
/// equals a serial run.
pub fn make_dataset(spec: &DatasetSpec) -> Result<Vec<ShapeRecord>> {
    (0..spec.count).into_par_iter().map(|i| make_record(spec, i)).collect()
}

const MANIFEST: &str = "manifest.txt";

pub fn shape_dir(root: &Path, index: usize) -> std::path::PathBuf {
    root.join(format!("shape_{index:05}"))
}

/// Writes the manifest and one subdirectory per shape.
pub fn write_dataset(root: &Path, spec: &DatasetSpec, records: &[ShapeRecord]) -> Result<()> {
    std::fs::create_dir_all(root)?;
    let manifest = format!(
        "count={}\nseed={}\nregime={}\nnoise_sigma={}\npoints={}\nsupervision={}\n",
        records.len(),
        spec.seed,
        spec.regime,
        spec.noise_sigma,
        spec.points,
        spec.supervision
    );
    std::fs::write(root.join(MANIFEST), manifest)?;
    for (i, r) in records.iter().enumerate() {
        let dir = shape_dir(root, i);
        std::fs::create_dir_all(&dir)?;
        geometry::write_xyz(&r.cloud, std::fs::File::create(dir.join("input.xyz"))?)?;
        r.supervision.write(std::fs::File::create(dir.join("supervision.bin"))?)?;
        let mut json = serde_json::to_string_pretty(&r.shape)?;
        json.push('\n');
        std::fs::write(dir.join("shape.json"), json)?;
    }
    Ok(())
}

fn manifest_value<'a>(text: &'a str, key: &str) -> Result<&'a str> {
    text.lines()
        .filter_map(|l| l.split_once('='))
        .find(|(k, _)| k.trim() == key)
        .map(|(_, v)| v.trim())
        .ok_or_else(|| SynthError::Format(format!("manifest is missing '{key}'")))
}

fn parse<V: FromStr>(text: &str, key: &str) -> Result<V> {
    manifest_value(text, key)?
        .parse()
        .map_err(|_| SynthError::Format(format!("bad manifest value for '{key}'")))
}

pub fn read_spec(root: &Path) -> Result<DatasetSpec> {
    let text = std::fs::read_to_string(root.join(MANIFEST))
        .map_err(|e| SynthError::Format(format!("{}: {e}", root.join(MANIFEST).display())))?;
    Ok(DatasetSpec {
        count: parse(&text, "count")?,
        seed: parse(&text, "seed")?,
        regime: manifest_value(&text, "regime")?.parse().map_err(SynthError::Format)?,
        noise_sigma: parse(&text, "noise_sigma")?,
        points: parse(&text, "points")?,
        supervision: parse(&text, "supervision")?,
    })
}

pub fn read_record(root: &Path, index: usize) -> Result<ShapeRecord> {
    let dir = shape_dir(root, index);
    let cloud = geometry::load_cloud(&dir.join("input.xyz"))?;
    let supervision = OccupancySamples::read(std::fs::File::open(dir.join("supervision.bin"))?)?;
    let shape: SdfShape = serde_json::from_str(&std::fs::read_to_string(dir.join("shape.json"))?)?;
    Ok(ShapeRecord { shape, cloud, supervision })
}

pub fn read_dataset(root: &Path) -> Result<(DatasetSpec, Vec<ShapeRecord>)> {
    let spec = read_spec(root)?;
    let records = (0..spec.count).map(|i| read_record(root, i)).collect::<Result<_>>()?;
    Ok((spec, records))
}
