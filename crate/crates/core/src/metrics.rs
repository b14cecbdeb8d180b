//! Reconstruction metrics: volumetric IoU, Chamfer-L1, normal consistency
//! and F-score.
//!
//! Surface metrics compare area-uniform point samples with normals. Every
//! sampler draws from a stream derived from the caller's seed, so two calls
//! with equal seeds see identical sample sets.

use crate::extraction::TriangleMesh;
use crate::geometry::{self, KdTree, Point};
use crate::rng::RngStream;
use crate::synthdata::{self, SdfShape};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum MetricError {
    #[error("empty surface: {0}")]
    Empty(String),
    #[error(transparent)]
    Synth(#[from] synthdata::SynthError),
}

pub type Result<T> = std::result::Result<T, MetricError>;

pub const DEFAULT_IOU_SAMPLES: usize = 100_000;
pub const DEFAULT_SURFACE_SAMPLES: usize = 100_000;
pub const DEFAULT_F_TAU: f64 = 0.01;

/// Uniform samples of the unit cube.
pub fn cube_samples(n: usize, seed: u64) -> Vec<Point> {
    let mut rng = RngStream::new(seed).split("iou");
    (0..n)
        .map(|_| [rng.next_f64() - 0.5, rng.next_f64() - 0.5, rng.next_f64() - 0.5])
        .collect()
}

/// Monte-Carlo IoU of two occupancy predicates over the unit cube; 1 when
/// both are empty on every sample.
pub fn iou(pred: impl Fn(&[Point]) -> Vec<bool>, gt: impl Fn(&[Point]) -> Vec<bool>, n: usize, seed: u64) -> f64 {
    let pts = cube_samples(n, seed);
    let (a, b) = (pred(&pts), gt(&pts));
    let inter = a.iter().zip(&b).filter(|(x, y)| **x && **y).count();
    let union = a.iter().zip(&b).filter(|(x, y)| **x || **y).count();
    if union == 0 {
        1.0
    } else {
        inter as f64 / union as f64
    }
}

/// Binomial standard error bound of a Monte-Carlo IoU estimate.
pub fn iou_std_error(n: usize) -> f64 {
    0.5 / (n as f64).sqrt()
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct SurfaceSamples {
    pub points: Vec<Point>,
    /// Unit normals.
    pub normals: Vec<Point>,
}

fn unit(v: Point) -> Point {
    let n = geometry::norm(v);
    if n > 0.0 {
        geometry::scale(v, 1.0 / n)
    } else {
        v
    }
}

/// Area-uniform samples with face normals. Zero-area faces are never drawn.
pub fn sample_mesh(mesh: &TriangleMesh, n: usize, seed: u64) -> Result<SurfaceSamples> {
    let mut cum = Vec::with_capacity(mesh.faces.len());
    let mut total = 0.0;
    for f in 0..mesh.faces.len() {
        total += mesh.face_area(f);
        cum.push(total);
    }
    if !(total > 0.0) {
        return Err(MetricError::Empty("mesh has no area".into()));
    }
    let mut rng = RngStream::new(seed).split("surface");
    let mut out = SurfaceSamples::default();
    for _ in 0..n {
        let u = rng.next_f64() * total;
        let f = cum.partition_point(|&c| c <= u).min(cum.len() - 1);
        let [a, b, c] = mesh.corners(f);
        let (r1, r2) = (rng.next_f64().sqrt(), rng.next_f64());
        let p = std::array::from_fn(|q| (1.0 - r1) * a[q] + r1 * (1.0 - r2) * b[q] + r1 * r2 * c[q]);
        out.points.push(p);
        out.normals.push(unit(mesh.face_cross(f)));
    }
    Ok(out)
}

/// Exact surface samples of an analytic shape; normals from the distance
/// gradient.
pub fn sample_shape(shape: &SdfShape, n: usize, seed: u64) -> Result<SurfaceSamples> {
    let mut rng = RngStream::new(seed).split("surface");
    let points = synthdata::sample_surface(shape, n, 0.0, &mut rng)?.points;
    let h = 1e-6;
    let normals = points
        .iter()
        .map(|p| {
            unit(std::array::from_fn(|a| {
                let (mut x, mut y) = (*p, *p);
                x[a] += h;
                y[a] -= h;
                shape.sdf(x) - shape.sdf(y)
            }))
        })
        .collect();
    Ok(SurfaceSamples { points, normals })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SurfaceScores {
    pub chamfer_l1: f64,
    pub normal_consistency: f64,
    pub f_score: f64,
}

/// For each sample of `from`, distance to and normal agreement with its
/// nearest neighbor in `to`.
fn one_way(from: &SurfaceSamples, to: &SurfaceSamples, tree: &KdTree) -> Vec<(f64, f64)> {
    from.points
        .par_iter()
        .zip(&from.normals)
        .map(|(p, n)| {
            let (j, d2) = tree.nearest(*p).expect("nonempty");
            (d2.sqrt(), geometry::dot(*n, to.normals[j]).abs())
        })
        .collect()
}

pub fn surface_scores(a: &SurfaceSamples, b: &SurfaceSamples, tau_f: f64) -> Result<SurfaceScores> {
    if a.points.is_empty() || b.points.is_empty() {
        return Err(MetricError::Empty("no surface samples".into()));
    }
    let ab = one_way(a, b, &KdTree::build(&b.points));
    let ba = one_way(b, a, &KdTree::build(&a.points));
    let mean = |v: &[(f64, f64)], pick: fn(&(f64, f64)) -> f64| v.iter().map(pick).sum::<f64>() / v.len() as f64;
    let frac = |v: &[(f64, f64)]| v.iter().filter(|x| x.0 <= tau_f).count() as f64 / v.len() as f64;
    let (precision, recall) = (frac(&ab), frac(&ba));
    Ok(SurfaceScores {
        chamfer_l1: 0.5 * (mean(&ab, |x| x.0) + mean(&ba, |x| x.0)),
        normal_consistency: 0.5 * (mean(&ab, |x| x.1) + mean(&ba, |x| x.1)),
        f_score: if precision + recall > 0.0 {
            2.0 * precision * recall / (precision + recall)
        } else {
            0.0
        },
    })
}

fn mesh_pair(a: &TriangleMesh, b: &TriangleMesh, n: usize, seed: u64) -> Result<(SurfaceSamples, SurfaceSamples)> {
    Ok((sample_mesh(a, n, seed)?, sample_mesh(b, n, seed)?))
}

pub fn chamfer_l1(a: &TriangleMesh, b: &TriangleMesh, n: usize, seed: u64) -> Result<f64> {
    let (sa, sb) = mesh_pair(a, b, n, seed)?;
    Ok(surface_scores(&sa, &sb, DEFAULT_F_TAU)?.chamfer_l1)
}

pub fn normal_consistency(a: &TriangleMesh, b: &TriangleMesh, n: usize, seed: u64) -> Result<f64> {
    let (sa, sb) = mesh_pair(a, b, n, seed)?;
    Ok(surface_scores(&sa, &sb, DEFAULT_F_TAU)?.normal_consistency)
}

pub fn f_score(a: &TriangleMesh, b: &TriangleMesh, tau_f: f64, n: usize, seed: u64) -> Result<f64> {
    let (sa, sb) = mesh_pair(a, b, n, seed)?;
    Ok(surface_scores(&sa, &sb, tau_f)?.f_score)
}

/// Inside test for closed meshes by ray parity along `+z`, with faces
/// binned over the xy plane.
pub struct MeshInside<'a> {
    mesh: &'a TriangleMesh,
    lo: [f64; 2],
    cell: [f64; 2],
    bins: usize,
    faces: Vec<Vec<u32>>,
}

impl<'a> MeshInside<'a> {
    pub fn new(mesh: &'a TriangleMesh) -> Self {
        let bins = ((mesh.faces.len() as f64).sqrt() as usize).clamp(1, 256);
        let (lo, hi) = if mesh.vertices.is_empty() {
            ([0.0; 3], [1.0; 3])
        } else {
            geometry::bounds(&mesh.vertices)
        };
        let cell = [
            ((hi[0] - lo[0]) / bins as f64).max(1e-12),
            ((hi[1] - lo[1]) / bins as f64).max(1e-12),
        ];
        let mut s = Self {
            mesh,
            lo: [lo[0], lo[1]],
            cell,
            bins,
            faces: vec![Vec::new(); bins * bins],
        };
        for f in 0..mesh.faces.len() {
            let c = mesh.corners(f);
            let (bx0, by0) = s.bin(c.iter().map(|p| p[0]).fold(f64::INFINITY, f64::min), c.iter().map(|p| p[1]).fold(f64::INFINITY, f64::min));
            let (bx1, by1) = s.bin(c.iter().map(|p| p[0]).fold(f64::NEG_INFINITY, f64::max), c.iter().map(|p| p[1]).fold(f64::NEG_INFINITY, f64::max));
            for x in bx0..=bx1 {
                for y in by0..=by1 {
                    s.faces[x * bins + y].push(f as u32);
                }
            }
        }
        s
    }

    fn bin(&self, x: f64, y: f64) -> (usize, usize) {
        let b = |v: f64, lo: f64, c: f64| (((v - lo) / c).floor().max(0.0) as usize).min(self.bins - 1);
        (b(x, self.lo[0], self.cell[0]), b(y, self.lo[1], self.cell[1]))
    }

    pub fn contains(&self, p: Point) -> bool {
        let (bx, by) = self.bin(p[0], p[1]);
        let mut crossings = 0usize;
        for &f in &self.faces[bx * self.bins + by] {
            let [a, b, c] = self.mesh.corners(f as usize);
            let e = |u: Point, v: Point| (v[0] - u[0]) * (p[1] - u[1]) - (v[1] - u[1]) * (p[0] - u[0]);
            let (w0, w1, w2) = (e(b, c), e(c, a), e(a, b));
            let inside = (w0 > 0.0 && w1 > 0.0 && w2 > 0.0) || (w0 < 0.0 && w1 < 0.0 && w2 < 0.0);
            if !inside {
                continue;
            }
            let s = w0 + w1 + w2;
            let z = (w0 * a[2] + w1 * b[2] + w2 * c[2]) / s;
            if z > p[2] {
                crossings += 1;
            }
        }
        crossings % 2 == 1
    }

    pub fn contains_all(&self, pts: &[Point]) -> Vec<bool> {
        pts.par_iter().map(|p| self.contains(*p)).collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub iou: f64,
    pub chamfer_l1: f64,
    pub normal_consistency: f64,
    pub f_score: f64,
    pub iou_samples: usize,
    pub surface_samples: usize,
    pub seed: u64,
}

impl EvalReport {
    pub fn key_values(&self) -> String {
        format!(
            "iou={}\nchamfer_l1={}\nnormal_consistency={}\nf_score={}\niou_samples={}\nsurface_samples={}\nseed={}\n",
            self.iou, self.chamfer_l1, self.normal_consistency, self.f_score, self.iou_samples, self.surface_samples, self.seed
        )
    }

    /// Component-wise mean; sample counts and seed come from the first.
    pub fn mean(reports: &[EvalReport]) -> Option<EvalReport> {
        let first = reports.first()?;
        let m = |f: fn(&EvalReport) -> f64| reports.iter().map(f).sum::<f64>() / reports.len() as f64;
        Some(EvalReport {
            iou: m(|r| r.iou),
            chamfer_l1: m(|r| r.chamfer_l1),
            normal_consistency: m(|r| r.normal_consistency),
            f_score: m(|r| r.f_score),
            ..first.clone()
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalSettings {
    pub iou_samples: usize,
    pub surface_samples: usize,
    pub tau_f: f64,
    pub seed: u64,
}

impl Default for EvalSettings {
    fn default() -> Self {
        Self {
            iou_samples: DEFAULT_IOU_SAMPLES,
            surface_samples: DEFAULT_SURFACE_SAMPLES,
            tau_f: DEFAULT_F_TAU,
            seed: 0,
        }
    }
}

/// Scores a reconstructed mesh against the analytic shape it came from.
pub fn evaluate_mesh(mesh: &TriangleMesh, shape: &SdfShape, s: &EvalSettings) -> Result<EvalReport> {
    let inside = MeshInside::new(mesh);
    let iou = iou(
        |q| inside.contains_all(q),
        |q| q.iter().map(|p| shape.occupied(*p)).collect(),
        s.iou_samples,
        s.seed,
    );
    let pred = sample_mesh(mesh, s.surface_samples, s.seed)?;
    let gt = sample_shape(shape, s.surface_samples, s.seed)?;
    let sc = surface_scores(&pred, &gt, s.tau_f)?;
    Ok(EvalReport {
        iou,
        chamfer_l1: sc.chamfer_l1,
        normal_consistency: sc.normal_consistency,
        f_score: sc.f_score,
        iou_samples: s.iou_samples,
        surface_samples: s.surface_samples,
        seed: s.seed,
    })
}

/// Scores a mesh against itself with shared samples.
pub fn self_report(mesh: &TriangleMesh, s: &EvalSettings) -> Result<EvalReport> {
    let inside = MeshInside::new(mesh);
    let occ = |q: &[Point]| inside.contains_all(q);
    let iou = iou(occ, occ, s.iou_samples, s.seed);
    let a = sample_mesh(mesh, s.surface_samples, s.seed)?;
    let sc = surface_scores(&a, &a, s.tau_f)?;
    Ok(EvalReport {
        iou,
        chamfer_l1: sc.chamfer_l1,
        normal_consistency: sc.normal_consistency,
        f_score: sc.f_score,
        iou_samples: s.iou_samples,
        surface_samples: s.surface_samples,
        seed: s.seed,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::extraction::{marching_cubes, mise};
    use crate::synthdata::Primitive;
    use proptest::prelude::*;

    /// Square `[0, 1]^2` at height `z`, optionally rotated to the xz plane.
    fn square(z: f64, vertical: bool, flip: bool) -> TriangleMesh {
        let mut v = vec![[0.0, 0.0, z], [1.0, 0.0, z], [1.0, 1.0, z], [0.0, 1.0, z]];
        if vertical {
            for p in &mut v {
                *p = [p[0], z, p[1]];
            }
        }
        let mut faces = vec![[0, 1, 2], [0, 2, 3]];
        if flip {
            for f in &mut faces {
                f.swap(1, 2);
            }
        }
        TriangleMesh { vertices: v, faces }
    }

    fn sphere_mesh(r: f64) -> TriangleMesh {
        let occ = |q: &[Point]| Ok(q.iter().map(|p| (geometry::norm(*p) <= r) as u8 as f64).collect());
        marching_cubes(&mise(occ, [-0.55; 3], [0.55; 3], 16, 1, 0.5).unwrap(), 0.5)
    }

    fn ball(r: f64) -> impl Fn(&[Point]) -> Vec<bool> {
        move |q: &[Point]| q.iter().map(|p| geometry::norm(*p) <= r).collect()
    }

    #[test]
    fn iou_identities() {
        assert_eq!(iou(ball(0.3), ball(0.3), 1000, 1), 1.0);
        let left = |q: &[Point]| q.iter().map(|p| p[0] < -0.1).collect::<Vec<_>>();
        let right = |q: &[Point]| q.iter().map(|p| p[0] > 0.1).collect::<Vec<_>>();
        assert_eq!(iou(left, right, 1000, 1), 0.0);
        let none = |q: &[Point]| vec![false; q.len()];
        assert_eq!(iou(none, none, 100, 1), 1.0);
    }

    #[test]
    fn concentric_spheres_iou() {
        let v = iou(ball(0.3), ball(0.4), 100_000, 7);
        assert!((v - 0.421875).abs() < 0.01, "{v}");
        assert!(iou_std_error(100_000) <= 0.005);
    }

    #[test]
    fn chamfer_identities() {
        let m = sphere_mesh(0.3);
        assert_eq!(chamfer_l1(&m, &m, 2000, 3).unwrap(), 0.0);
        let other = sphere_mesh(0.25);
        assert_eq!(chamfer_l1(&m, &other, 2000, 3).unwrap(), chamfer_l1(&other, &m, 2000, 3).unwrap());
        assert!(chamfer_l1(&m, &TriangleMesh::default(), 10, 3).is_err());
    }

    #[test]
    fn parallel_squares_chamfer_tends_to_gap() {
        let h = 0.05;
        let c = chamfer_l1(&square(0.0, false, false), &square(h, false, false), 10_000, 4).unwrap();
        assert!((c - h).abs() < 0.05 * h, "{c}");
    }

    #[test]
    fn normal_consistency_cases() {
        let a = square(0.0, false, false);
        assert_eq!(normal_consistency(&a, &a, 1000, 5).unwrap(), 1.0);
        assert!((normal_consistency(&a, &square(0.0, false, true), 1000, 5).unwrap() - 1.0).abs() < 1e-12);
        let nc = normal_consistency(&a, &square(0.5, true, false), 1000, 5).unwrap();
        assert!(nc.abs() < 0.02, "{nc}");
    }

    #[test]
    fn f_score_cases() {
        let a = square(0.0, false, false);
        assert_eq!(f_score(&a, &a, 0.01, 1000, 6).unwrap(), 1.0);
        assert_eq!(f_score(&a, &square(0.5, false, false), 0.01, 1000, 6).unwrap(), 0.0);
        let f = f_score(&a, &square(0.005, false, false), 0.01, 10_000, 6).unwrap();
        assert!((f - 1.0).abs() <= 0.01, "{f}");
    }

    #[test]
    fn mesh_inside_matches_sphere() {
        let m = sphere_mesh(0.35);
        let inside = MeshInside::new(&m);
        let pts = cube_samples(5000, 9);
        let wrong = pts
            .iter()
            .filter(|p| {
                let r = geometry::norm(**p);
                (r - 0.35).abs() > 0.05 && inside.contains(**p) != (r < 0.35)
            })
            .count();
        assert_eq!(wrong, 0);
    }

    #[test]
    fn self_report_is_perfect() {
        let r = self_report(&sphere_mesh(0.3), &EvalSettings { iou_samples: 5000, surface_samples: 2000, ..Default::default() }).unwrap();
        assert_eq!((r.iou, r.chamfer_l1, r.normal_consistency, r.f_score), (1.0, 0.0, 1.0, 1.0));
    }

    #[test]
    fn reconstruction_of_analytic_shape_scores_well() {
        let shape = SdfShape::new(vec![Primitive::Sphere { center: [0.0; 3], radius: 0.3 }]).unwrap();
        let occ = |q: &[Point]| Ok(q.iter().map(|p| 1.0 / (1.0 + ((geometry::norm(*p) - 0.3) / 0.01).exp())).collect());
        let m = marching_cubes(&mise(occ, [-0.55; 3], [0.55; 3], 32, 1, 0.5).unwrap(), 0.5);
        let r = evaluate_mesh(&m, &shape, &EvalSettings { iou_samples: 20_000, surface_samples: 100_000, ..Default::default() }).unwrap();
        assert!(r.iou > 0.97 && r.normal_consistency > 0.99 && r.chamfer_l1 < 0.005 && r.f_score > 0.95, "{r:?}");
        let mean = EvalReport::mean(&[r.clone(), r.clone()]).unwrap();
        assert_eq!(mean, r);
    }

    #[test]
    fn shape_normals_point_outward() {
        let shape = SdfShape::new(vec![Primitive::Sphere { center: [0.0; 3], radius: 0.3 }]).unwrap();
        let s = sample_shape(&shape, 100, 1).unwrap();
        for (p, n) in s.points.iter().zip(&s.normals) {
            assert!(geometry::dot(unit(*p), *n) > 0.999);
        }
    }

    proptest! {
        #[test]
        fn metrics_are_translation_invariant(tx in -0.2f64..0.2, ty in -0.2f64..0.2) {
            let a = square(0.0, false, false);
            let b = square(0.02, true, false);
            let t = [tx, ty, 0.0];
            let c0 = chamfer_l1(&a, &b, 500, 2).unwrap();
            let c1 = chamfer_l1(&a.translated(t), &b.translated(t), 500, 2).unwrap();
            prop_assert!((c0 - c1).abs() < 1e-9);
        }
    }
}
