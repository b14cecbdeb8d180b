use super::*;
use crate::rng::RngStream;
use std::f64::consts::PI;

const LO: Point = [-0.55; 3];
const HI: Point = [0.55; 3];

fn sphere_occ(r: f64) -> impl FnMut(&[Point]) -> Result<Vec<f64>> {
    move |q: &[Point]| Ok(q.iter().map(|p| (geometry::norm(*p) <= r) as u8 as f64).collect())
}

/// Smooth occupancy from a sum of random Gaussian bumps.
fn random_field(seed: u64) -> impl FnMut(&[Point]) -> Result<Vec<f64>> {
    let mut rng = RngStream::new(seed);
    let bumps: Vec<(Point, f64, f64)> = (0..4)
        .map(|_| {
            let c = [rng.uniform_range(-0.3, 0.3), rng.uniform_range(-0.3, 0.3), rng.uniform_range(-0.3, 0.3)];
            (c, rng.uniform_range(0.1, 0.2), rng.uniform_range(0.6, 1.2))
        })
        .collect();
    move |q: &[Point]| {
        Ok(q.iter()
            .map(|p| {
                let s: f64 = bumps.iter().map(|(c, w, a)| a * (-geometry::dist2(*p, *c) / (w * w)).exp()).sum();
                1.0 / (1.0 + (-8.0 * (s - 0.5)).exp())
            })
            .collect())
    }
}

#[test]
fn constant_field_needs_no_refinement() {
    let g = mise(|q: &[Point]| Ok(vec![0.0; q.len()]), LO, HI, 16, 2, 0.5).unwrap();
    assert_eq!(g.evaluations, 17usize.pow(3));
    assert!(marching_cubes(&g, 0.5).is_empty());
}

#[test]
fn sphere_matches_dense_with_few_evaluations() {
    let g = mise(sphere_occ(0.4), LO, HI, 32, 2, 0.5).unwrap();
    let d = dense(sphere_occ(0.4), LO, HI, 128).unwrap();
    assert_eq!(g.straddle_pattern(0.5), d.straddle_pattern(0.5));
    let frac = g.evaluations as f64 / d.evaluations as f64;
    assert!(frac < 0.15, "{frac}");
}

#[test]
fn random_fields_match_dense() {
    for seed in 0..3 {
        let g = mise(random_field(seed), LO, HI, 16, 2, 0.5).unwrap();
        let d = dense(random_field(seed), LO, HI, 64).unwrap();
        assert_eq!(g.straddle_pattern(0.5), d.straddle_pattern(0.5), "seed {seed}");
        let m = marching_cubes(&g, 0.5);
        assert!(!m.is_empty() && m.is_watertight(), "seed {seed}");
    }
}

#[test]
fn all_outside_gives_empty_mesh() {
    let d = dense(|q: &[Point]| Ok(vec![0.2; q.len()]), LO, HI, 8).unwrap();
    assert_eq!(marching_cubes(&d, 0.5), TriangleMesh::default());
}

#[test]
fn half_space_gives_plane_at_interpolated_position() {
    let c = 0.0137;
    let d = dense(|q: &[Point]| Ok(q.iter().map(|p| 0.5 + (c - p[0])).collect()), LO, HI, 20).unwrap();
    let m = marching_cubes(&d, 0.5);
    let interior: Vec<&Point> = m
        .vertices
        .iter()
        .filter(|v| v.iter().all(|x| x.abs() < 0.55 - 1e-9))
        .collect();
    assert!(!interior.is_empty());
    for v in interior {
        assert!((v[0] - c).abs() <= 1e-6, "{v:?}");
    }
    // The half space touches the box, so boundary caps close it.
    assert!(m.is_watertight());
}

#[test]
fn sphere_mesh_is_accurate_watertight_and_outward() {
    let g = mise(sphere_occ(0.4), LO, HI, 32, 2, 0.5).unwrap();
    let m = marching_cubes(&g, 0.5);
    assert!(m.vertices.iter().all(|v| (geometry::norm(*v) - 0.4).abs() <= 2.0 / 128.0));
    assert!(m.is_watertight());
    let vol = 4.0 / 3.0 * PI * 0.4f64.powi(3);
    assert!((m.signed_volume() - vol).abs() < 0.02 * vol, "{}", m.signed_volume());
    assert!((0..m.faces.len()).all(|f| m.face_area(f) > 0.0));
}

#[test]
fn grid_sampling_reproduces_vertices() {
    let d = dense(random_field(5), LO, HI, 12).unwrap();
    for (i, j, k) in [(0, 0, 0), (3, 7, 11), (12, 12, 12)] {
        let p = d.position(i as isize, j as isize, k as isize);
        assert!((d.sample(p) - d.value(i, j, k)).abs() < 1e-12);
    }
    assert_eq!(d.sample([0.7, 0.0, 0.0]), 0.0);
}

#[test]
fn obj_round_trip() {
    let m = marching_cubes(&mise(sphere_occ(0.3), LO, HI, 8, 1, 0.5).unwrap(), 0.5);
    let mut buf = Vec::new();
    m.write_obj(&mut buf).unwrap();
    assert_eq!(TriangleMesh::read_obj(buf.as_slice()).unwrap(), m);
    let quad = "v 0 0 0\nv 1 0 0\nv 1 1 0\nv 0 1 0\nf 1/1 2/2 3/3 4/4\n";
    assert_eq!(TriangleMesh::read_obj(quad.as_bytes()).unwrap().faces, vec![[0, 1, 2], [0, 2, 3]]);
    assert!(TriangleMesh::read_obj("v 0 0 0\nf 1 2 3\n".as_bytes()).is_err());
}

#[test]
fn rejects_bad_input() {
    assert!(mise(|q: &[Point]| Ok(vec![f64::NAN; q.len()]), LO, HI, 8, 1, 0.5).is_err());
    assert!(mise(sphere_occ(0.3), LO, HI, 4, 1, 0.5).is_err());
    assert!(mise(sphere_occ(0.3), LO, HI, 8, 1, 1.0).is_err());
    assert!(mise(sphere_occ(0.3), HI, LO, 8, 1, 0.5).is_err());
}

#[test]
fn box_is_clipped_to_domain() {
    let c = PointCloud::new(vec![[-0.5, 0.0, 0.1], [0.2, 0.49, -0.3]]).unwrap();
    let (lo, hi) = reconstruction_box(&c, 0.1);
    assert_eq!(lo, [-0.55, -0.1, -0.4]);
    assert!((hi[0] - 0.3).abs() < 1e-12 && hi[1] == 0.55 && (hi[2] - 0.2).abs() < 1e-12);
}
