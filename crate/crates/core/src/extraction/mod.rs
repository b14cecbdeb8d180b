//! Surface extraction from an occupancy function: multiresolution grid
//! refinement followed by marching cubes.
//!
//! A grid of resolution `R` has `R` cells and `R + 1` vertices per axis.
//! Refinement starts from a coarse lattice, subdivides only cells whose
//! corners disagree about the threshold, and keeps activating neighbors
//! while newly evaluated vertices reveal the surface inside them. Vertices
//! that are never evaluated inherit trilinear values from their enclosing
//! uniform cell, so they sit on the same side of the threshold.

mod table;

use crate::encoder::ModelError;
use crate::geometry::{self, Point, PointCloud};
use crate::model::Model;
use crate::tensor::{ParamStore, Scalar};
use std::collections::HashMap;
use std::io::{BufRead, Write};
use table::TRI_TABLE;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ExtractError {
    #[error("invalid extraction settings: {0}")]
    Config(String),
    #[error("occupancy function returned {0}")]
    BadValues(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("bad mesh file: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, ExtractError>;

/// Extent of the training domain; reconstruction grids never leave it.
pub const DOMAIN: f64 = 0.55;

#[derive(Clone, Debug, PartialEq)]
pub struct ExtractConfig {
    pub r0: usize,
    pub upsample: u32,
    pub tau: f64,
    /// Inflation of the input bounding box.
    pub padding: f64,
}

impl Default for ExtractConfig {
    fn default() -> Self {
        Self {
            r0: 32,
            upsample: 2,
            tau: 0.5,
            padding: 0.1,
        }
    }
}

impl ExtractConfig {
    pub fn validate(&self) -> Result<()> {
        if self.r0 < 8 {
            return Err(ExtractError::Config(format!("r0 = {} is below 8", self.r0)));
        }
        if self.upsample > 6 {
            return Err(ExtractError::Config(format!("{} upsampling steps is too many", self.upsample)));
        }
        if !(self.tau > 0.0 && self.tau < 1.0) {
            return Err(ExtractError::Config(format!("tau {} outside (0, 1)", self.tau)));
        }
        Ok(())
    }

    pub fn resolution(&self) -> usize {
        self.r0 << self.upsample
    }
}

#[derive(Clone, Debug)]
pub struct OccupancyGrid {
    pub res: usize,
    pub lo: Point,
    pub hi: Point,
    /// Vertex values, x-major: index `(i * n + j) * n + k` with `n = res + 1`.
    pub values: Vec<f64>,
    pub evaluated: Vec<bool>,
    /// Number of occupancy queries spent.
    pub evaluations: usize,
}

impl OccupancyGrid {
    fn new(res: usize, lo: Point, hi: Point) -> Self {
        let n = (res + 1).pow(3);
        Self {
            res,
            lo,
            hi,
            values: vec![0.0; n],
            evaluated: vec![false; n],
            evaluations: 0,
        }
    }

    pub fn n(&self) -> usize {
        self.res + 1
    }

    pub fn index(&self, i: usize, j: usize, k: usize) -> usize {
        (i * self.n() + j) * self.n() + k
    }

    fn ijk(&self, v: usize) -> [usize; 3] {
        let n = self.n();
        [v / (n * n), (v / n) % n, v % n]
    }

    /// World position of a (possibly out-of-range) lattice coordinate.
    pub fn position(&self, i: isize, j: isize, k: isize) -> Point {
        let r = self.res as f64;
        let c = [i, j, k];
        std::array::from_fn(|a| self.lo[a] + (self.hi[a] - self.lo[a]) * c[a] as f64 / r)
    }

    pub fn value(&self, i: usize, j: usize, k: usize) -> f64 {
        self.values[self.index(i, j, k)]
    }

    pub fn cell_size(&self) -> Point {
        std::array::from_fn(|a| (self.hi[a] - self.lo[a]) / self.res as f64)
    }

    fn evaluate<F>(&mut self, f: &mut F, verts: &[usize]) -> Result<()>
    where
        F: FnMut(&[Point]) -> Result<Vec<f64>>,
    {
        if verts.is_empty() {
            return Ok(());
        }
        let pts: Vec<Point> = verts
            .iter()
            .map(|&v| {
                let [i, j, k] = self.ijk(v);
                self.position(i as isize, j as isize, k as isize)
            })
            .collect();
        let vals = f(&pts)?;
        if vals.len() != pts.len() {
            return Err(ExtractError::BadValues(format!("{} values for {} points", vals.len(), pts.len())));
        }
        if let Some(v) = vals.iter().find(|v| !v.is_finite()) {
            return Err(ExtractError::BadValues(format!("non-finite value {v}")));
        }
        for (&v, x) in verts.iter().zip(vals) {
            self.values[v] = x;
            self.evaluated[v] = true;
        }
        self.evaluations += verts.len();
        Ok(())
    }

    /// Trilinear interpolation; points outside the box read as 0.
    pub fn sample(&self, p: Point) -> f64 {
        let mut base = [0usize; 3];
        let mut frac = [0.0; 3];
        for a in 0..3 {
            let t = (p[a] - self.lo[a]) / (self.hi[a] - self.lo[a]) * self.res as f64;
            if !(0.0..=self.res as f64).contains(&t) {
                return 0.0;
            }
            let b = (t.floor() as usize).min(self.res - 1);
            base[a] = b;
            frac[a] = t - b as f64;
        }
        let mut acc = 0.0;
        for c in 0..8 {
            let o = [c >> 2 & 1, c >> 1 & 1, c & 1];
            let w: f64 = (0..3).map(|a| if o[a] == 1 { frac[a] } else { 1.0 - frac[a] }).product();
            acc += w * self.value(base[0] + o[0], base[1] + o[1], base[2] + o[2]);
        }
        acc
    }

    /// Whether `p` lies on the occupied side of `tau`.
    pub fn occupied(&self, p: Point, tau: f64) -> bool {
        self.sample(p) > tau
    }

    /// Per-cell flags: does the cell have corners on both sides of `tau`?
    pub fn straddle_pattern(&self, tau: f64) -> Vec<bool> {
        let r = self.res;
        let mut out = Vec::with_capacity(r * r * r);
        for i in 0..r {
            for j in 0..r {
                for k in 0..r {
                    let mut inside = 0;
                    for c in 0..8 {
                        inside += (self.value(i + (c >> 2 & 1), j + (c >> 1 & 1), k + (c & 1)) > tau) as usize;
                    }
                    out.push(inside != 0 && inside != 8);
                }
            }
        }
        out
    }
}

fn check_box(lo: Point, hi: Point) -> Result<()> {
    if (0..3).any(|a| !(hi[a] > lo[a]) || !lo[a].is_finite() || !hi[a].is_finite()) {
        return Err(ExtractError::Config("empty bounding box".into()));
    }
    Ok(())
}

/// Evaluates every vertex of a `res` grid.
pub fn dense<F>(mut f: F, lo: Point, hi: Point, res: usize) -> Result<OccupancyGrid>
where
    F: FnMut(&[Point]) -> Result<Vec<f64>>,
{
    check_box(lo, hi)?;
    let mut g = OccupancyGrid::new(res, lo, hi);
    let all: Vec<usize> = (0..g.values.len()).collect();
    g.evaluate(&mut f, &all)?;
    Ok(g)
}

/// Cells at stride `s` that contain lattice vertex `v`.
fn cells_containing(ijk: [usize; 3], s: usize, c: usize, out: &mut Vec<usize>) {
    let mut ranges = [(0usize, 0usize); 3];
    for a in 0..3 {
        let q = ijk[a] / s;
        ranges[a] = if ijk[a] % s == 0 {
            (q.saturating_sub(1), q.min(c - 1))
        } else {
            (q, q)
        };
    }
    out.clear();
    for x in ranges[0].0..=ranges[0].1 {
        for y in ranges[1].0..=ranges[1].1 {
            for z in ranges[2].0..=ranges[2].1 {
                out.push((x * c + y) * c + z);
            }
        }
    }
}

/// Adaptive evaluation up to resolution `r0 * 2^upsample` inside `[lo, hi]`.
pub fn mise<F>(mut f: F, lo: Point, hi: Point, r0: usize, upsample: u32, tau: f64) -> Result<OccupancyGrid>
where
    F: FnMut(&[Point]) -> Result<Vec<f64>>,
{
    ExtractConfig { r0, upsample, tau, padding: 0.0 }.validate()?;
    check_box(lo, hi)?;
    let res = r0 << upsample;
    let mut g = OccupancyGrid::new(res, lo, hi);
    let s0 = 1usize << upsample;
    let coarse: Vec<usize> = (0..=r0)
        .flat_map(|i| (0..=r0).flat_map(move |j| (0..=r0).map(move |k| (i, j, k))))
        .map(|(i, j, k)| g.index(i * s0, j * s0, k * s0))
        .collect();
    g.evaluate(&mut f, &coarse)?;

    let mut scratch = Vec::new();
    for level in 0..upsample {
        let s = s0 >> level;
        let h = s / 2;
        let c = res / s;
        let corner = |g: &OccupancyGrid, cell: usize, o: usize| {
            let (x, y, z) = (cell / (c * c), (cell / c) % c, cell % c);
            g.value(x * s + (o >> 2 & 1) * s, y * s + (o >> 1 & 1) * s, z * s + (o & 1) * s)
        };
        let mut active = vec![false; c * c * c];
        let mut queue: Vec<usize> = (0..c * c * c)
            .filter(|&cell| {
                let n_in = (0..8).filter(|&o| corner(&g, cell, o) > tau).count();
                n_in != 0 && n_in != 8
            })
            .collect();
        for &cell in &queue {
            active[cell] = true;
        }
        let mut pending_mark = vec![false; g.values.len()];
        while !queue.is_empty() {
            let mut pending = Vec::new();
            for &cell in &queue {
                let (x, y, z) = (cell / (c * c), (cell / c) % c, cell % c);
                for a in 0..3 {
                    for b in 0..3 {
                        for d in 0..3 {
                            let v = g.index(x * s + a * h, y * s + b * h, z * s + d * h);
                            if !g.evaluated[v] && !pending_mark[v] {
                                pending_mark[v] = true;
                                pending.push(v);
                            }
                        }
                    }
                }
            }
            g.evaluate(&mut f, &pending)?;
            queue.clear();
            for &v in &pending {
                let side = g.values[v] > tau;
                cells_containing(g.ijk(v), s, c, &mut scratch);
                for &cell in &scratch {
                    if !active[cell] && (0..8).any(|o| (corner(&g, cell, o) > tau) != side) {
                        active[cell] = true;
                        queue.push(cell);
                    }
                }
            }
        }
        // Inactive cells hand their uniform side down to the finer lattice.
        for cell in (0..c * c * c).filter(|&cell| !active[cell]) {
            let (x, y, z) = (cell / (c * c), (cell / c) % c, cell % c);
            let cv: [f64; 8] = std::array::from_fn(|o| corner(&g, cell, o));
            for a in 0..3 {
                for b in 0..3 {
                    for d in 0..3 {
                        let v = g.index(x * s + a * h, y * s + b * h, z * s + d * h);
                        if g.evaluated[v] {
                            continue;
                        }
                        let t = [a as f64 * 0.5, b as f64 * 0.5, d as f64 * 0.5];
                        let mut acc = 0.0;
                        for (o, val) in cv.iter().enumerate() {
                            let bits = [o >> 2 & 1, o >> 1 & 1, o & 1];
                            let w: f64 = (0..3).map(|q| if bits[q] == 1 { t[q] } else { 1.0 - t[q] }).product();
                            acc += w * val;
                        }
                        g.values[v] = acc;
                    }
                }
            }
        }
    }
    Ok(g)
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TriangleMesh {
    pub vertices: Vec<Point>,
    pub faces: Vec<[u32; 3]>,
}

impl TriangleMesh {
    pub fn is_empty(&self) -> bool {
        self.faces.is_empty()
    }

    pub fn corners(&self, f: usize) -> [Point; 3] {
        self.faces[f].map(|v| self.vertices[v as usize])
    }

    /// Cross product of two edges: twice the area, along the outward normal
    /// for counter-clockwise winding.
    pub fn face_cross(&self, f: usize) -> Point {
        let [a, b, c] = self.corners(f);
        geometry::cross(geometry::sub(b, a), geometry::sub(c, a))
    }

    pub fn face_area(&self, f: usize) -> f64 {
        0.5 * geometry::norm(self.face_cross(f))
    }

    pub fn area(&self) -> f64 {
        (0..self.faces.len()).map(|f| self.face_area(f)).sum()
    }

    /// Enclosed volume, positive for outward-facing normals.
    pub fn signed_volume(&self) -> f64 {
        (0..self.faces.len())
            .map(|f| {
                let [a, b, c] = self.corners(f);
                geometry::dot(a, geometry::cross(b, c)) / 6.0
            })
            .sum()
    }

    /// Every undirected edge is used by exactly two faces, once in each
    /// direction.
    pub fn is_watertight(&self) -> bool {
        let mut edges: HashMap<(u32, u32), i32> = HashMap::new();
        for f in &self.faces {
            for e in 0..3 {
                let (a, b) = (f[e], f[(e + 1) % 3]);
                let key = (a.min(b), a.max(b));
                *edges.entry(key).or_insert(0) += if a < b { 1 } else { 1 << 8 };
            }
        }
        edges.values().all(|&c| c == 1 + (1 << 8))
    }

    pub fn translated(&self, t: Point) -> Self {
        Self {
            vertices: self.vertices.iter().map(|v| geometry::add(*v, t)).collect(),
            faces: self.faces.clone(),
        }
    }

    /// Wavefront OBJ with `v` and `f` records and 1-based indices.
    pub fn write_obj(&self, w: impl Write) -> Result<()> {
        let mut w = std::io::BufWriter::new(w);
        for v in &self.vertices {
            writeln!(w, "v {} {} {}", v[0], v[1], v[2])?;
        }
        for f in &self.faces {
            writeln!(w, "f {} {} {}", f[0] + 1, f[1] + 1, f[2] + 1)?;
        }
        w.flush()?;
        Ok(())
    }

    /// Reads `v` and `f` records; polygons are fan-triangulated and other
    /// records ignored.
    pub fn read_obj(r: impl std::io::Read) -> Result<Self> {
        let mut mesh = Self::default();
        for (ln, line) in std::io::BufReader::new(r).lines().enumerate() {
            let line = line?;
            let mut it = line.split_whitespace();
            let bad = |m: &str| ExtractError::Format(format!("line {}: {m}", ln + 1));
            match it.next() {
                Some("v") => {
                    let c: Vec<f64> = it.take(3).map(|s| s.parse::<f64>()).collect::<std::result::Result<_, _>>().map_err(|e| bad(&e.to_string()))?;
                    if c.len() != 3 {
                        return Err(bad("vertex needs three coordinates"));
                    }
                    mesh.vertices.push([c[0], c[1], c[2]]);
                }
                Some("f") => {
                    let idx: Vec<u32> = it
                        .map(|s| s.split('/').next().unwrap_or("").parse::<u32>())
                        .collect::<std::result::Result<_, _>>()
                        .map_err(|e| bad(&e.to_string()))?;
                    if idx.len() < 3 || idx.iter().any(|&i| i == 0 || i as usize > mesh.vertices.len()) {
                        return Err(bad("face index out of range"));
                    }
                    for t in 1..idx.len() - 1 {
                        mesh.faces.push([idx[0] - 1, idx[t] - 1, idx[t + 1] - 1]);
                    }
                }
                _ => {}
            }
        }
        Ok(mesh)
    }

    pub fn save_obj(&self, path: &std::path::Path) -> Result<()> {
        self.write_obj(std::fs::File::create(path)?)
    }

    pub fn load_obj(path: &std::path::Path) -> Result<Self> {
        Self::read_obj(std::fs::File::open(path)?)
    }
}

/// Corner offsets in table order.
const CORNERS: [[usize; 3]; 8] = [
    [0, 0, 0],
    [1, 0, 0],
    [1, 1, 0],
    [0, 1, 0],
    [0, 0, 1],
    [1, 0, 1],
    [1, 1, 1],
    [0, 1, 1],
];

const EDGES: [(usize, usize); 12] = [
    (0, 1),
    (1, 2),
    (2, 3),
    (3, 0),
    (4, 5),
    (5, 6),
    (6, 7),
    (7, 4),
    (0, 4),
    (1, 5),
    (2, 6),
    (3, 7),
];

/// Edge crossings are kept off the lattice vertices, so triangles never
/// collapse.
const EDGE_CLAMP: f64 = 1e-6;

/// Triangulates the `tau` level set, outward normals facing away from the
/// occupied side. The grid is surrounded by one layer of empty cells, which
/// closes surfaces that touch the box.
pub fn marching_cubes(grid: &OccupancyGrid, tau: f64) -> TriangleMesh {
    let r = grid.res as isize;
    let n = grid.n() as isize;
    let value = |i: isize, j: isize, k: isize| -> f64 {
        if i < 0 || j < 0 || k < 0 || i >= n || j >= n || k >= n {
            f64::NEG_INFINITY
        } else {
            grid.value(i as usize, j as usize, k as usize)
        }
    };
    // Padded lattice has n + 2 vertices per axis.
    let m = (n + 2) as usize;
    let key = |p: [isize; 3], axis: usize| ((((p[0] + 1) as usize * m + (p[1] + 1) as usize) * m + (p[2] + 1) as usize) * 3) + axis;
    let mut ids: HashMap<usize, u32> = HashMap::new();
    let mut mesh = TriangleMesh::default();
    for i in -1..=r {
        for j in -1..=r {
            for k in -1..=r {
                let mut vals = [0.0; 8];
                let mut case = 0usize;
                for (c, o) in CORNERS.iter().enumerate() {
                    vals[c] = value(i + o[0] as isize, j + o[1] as isize, k + o[2] as isize);
                    if vals[c] > tau {
                        case |= 1 << c;
                    }
                }
                if case == 0 || case == 255 {
                    continue;
                }
                let row = &TRI_TABLE[case];
                let mut t = 0;
                while t < 15 && row[t] >= 0 {
                    let mut tri = [0u32; 3];
                    for (slot, &e) in tri.iter_mut().zip(&row[t..t + 3]) {
                        let (a, b) = EDGES[e as usize];
                        let (oa, ob) = (CORNERS[a], CORNERS[b]);
                        let axis = (0..3).find(|&q| oa[q] != ob[q]).unwrap();
                        let (lo_c, hi_c) = if oa[axis] < ob[axis] { (a, b) } else { (b, a) };
                        let o = CORNERS[lo_c];
                        let p0 = [i + o[0] as isize, j + o[1] as isize, k + o[2] as isize];
                        *slot = *ids.entry(key(p0, axis)).or_insert_with(|| {
                            let (v0, v1) = (vals[lo_c], vals[hi_c]);
                            let s = if v0.is_infinite() || v1.is_infinite() {
                                0.5
                            } else {
                                ((tau - v0) / (v1 - v0)).clamp(EDGE_CLAMP, 1.0 - EDGE_CLAMP)
                            };
                            let x0 = grid.position(p0[0], p0[1], p0[2]);
                            let mut p1 = p0;
                            p1[axis] += 1;
                            let x1 = grid.position(p1[0], p1[1], p1[2]);
                            mesh.vertices.push(std::array::from_fn(|q| x0[q] + s * (x1[q] - x0[q])));
                            (mesh.vertices.len() - 1) as u32
                        });
                    }
                    // The table winds faces towards the occupied side.
                    mesh.faces.push([tri[0], tri[2], tri[1]]);
                    t += 3;
                }
            }
        }
    }
    mesh
}

/// Grid box for an input cloud: its bounding box inflated by `padding` and
/// clipped to the training domain.
pub fn reconstruction_box(cloud: &PointCloud, padding: f64) -> (Point, Point) {
    let (lo, hi) = cloud.bounds();
    (
        lo.map(|v| (v - padding).max(-DOMAIN)),
        hi.map(|v| (v + padding).min(DOMAIN)),
    )
}

/// Encodes `cloud` once and refines its occupancy grid.
pub fn reconstruct_grid<T: Scalar>(
    model: &Model,
    params: &ParamStore<T>,
    cloud: &PointCloud,
    cfg: &ExtractConfig,
) -> Result<OccupancyGrid> {
    cfg.validate()?;
    let enc = model.encode(params, cloud)?;
    let (lo, hi) = reconstruction_box(cloud, cfg.padding);
    mise(|q| Ok(model.decode(params, &enc, q)?), lo, hi, cfg.r0, cfg.upsample, cfg.tau)
}

pub fn reconstruct<T: Scalar>(model: &Model, params: &ParamStore<T>, cloud: &PointCloud, cfg: &ExtractConfig) -> Result<TriangleMesh> {
    let grid = reconstruct_grid(model, params, cloud, cfg)?;
    Ok(marching_cubes(&grid, cfg.tau))
}

#[cfg(test)]
mod tests;
