//! Point clouds, deterministic farthest point sampling and exact k-nearest
//! neighbors.
//!
//! All geometry runs in `f64` regardless of the network precision, so index
//! selections do not depend on whether a model is evaluated in `f32` or `f64`.

use rayon::prelude::*;
use std::cmp::Ordering;
use std::io::{BufRead, BufWriter, Read, Write};
use std::path::Path;
use thiserror::Error;

pub type Point = [f64; 3];

#[derive(Debug, Error)]
pub enum GeometryError {
    #[error("{op}: requested {requested} of {available} points")]
    TooFew {
        op: &'static str,
        requested: usize,
        available: usize,
    },
    #[error("point cloud: {0}")]
    Invalid(String),
    #[error("point cloud i/o: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, GeometryError>;

/// `N x 3` coordinates with optional `N x d0` features (row-major).
#[derive(Clone, Debug, PartialEq)]
pub struct PointCloud {
    pub points: Vec<Point>,
    pub feature_dim: usize,
    pub features: Vec<f64>,
}

impl PointCloud {
    pub fn new(points: Vec<Point>) -> Result<Self> {
        Self::with_features(points, 0, Vec::new())
    }

    pub fn with_features(points: Vec<Point>, feature_dim: usize, features: Vec<f64>) -> Result<Self> {
        if points.is_empty() {
            return Err(GeometryError::Invalid("no points".into()));
        }
        if features.len() != points.len() * feature_dim {
            return Err(GeometryError::Invalid(format!(
                "{} feature values for {} points of width {feature_dim}",
                features.len(),
                points.len()
            )));
        }
        if points.iter().flatten().chain(&features).any(|v| !v.is_finite()) {
            return Err(GeometryError::Invalid("non-finite value".into()));
        }
        Ok(Self {
            points,
            feature_dim,
            features,
        })
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn translated(&self, t: Point) -> Self {
        Self {
            points: self.points.iter().map(|p| add(*p, t)).collect(),
            ..self.clone()
        }
    }

    /// Rows reordered so that row `i` of the result is row `perm[i]` here.
    pub fn permuted(&self, perm: &[usize]) -> Self {
        let d = self.feature_dim;
        Self {
            points: perm.iter().map(|&i| self.points[i]).collect(),
            feature_dim: d,
            features: perm
                .iter()
                .flat_map(|&i| self.features[i * d..(i + 1) * d].iter().copied())
                .collect(),
        }
    }

    /// Axis-aligned bounding box `(min, max)`.
    pub fn bounds(&self) -> (Point, Point) {
        bounds(&self.points)
    }
}

pub fn bounds(points: &[Point]) -> (Point, Point) {
    let mut lo = [f64::INFINITY; 3];
    let mut hi = [f64::NEG_INFINITY; 3];
    for p in points {
        for a in 0..3 {
            lo[a] = lo[a].min(p[a]);
            hi[a] = hi[a].max(p[a]);
        }
    }
    (lo, hi)
}

pub fn add(a: Point, b: Point) -> Point {
    [a[0] + b[0], a[1] + b[1], a[2] + b[2]]
}

pub fn sub(a: Point, b: Point) -> Point {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

pub fn scale(a: Point, s: f64) -> Point {
    [a[0] * s, a[1] * s, a[2] * s]
}

pub fn dot(a: Point, b: Point) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

pub fn cross(a: Point, b: Point) -> Point {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

pub fn norm(a: Point) -> f64 {
    dot(a, a).sqrt()
}

pub fn dist2(a: Point, b: Point) -> f64 {
    let d = sub(a, b);
    dot(d, d)
}

fn lex(a: &Point, b: &Point) -> Ordering {
    a[0].total_cmp(&b[0])
        .then(a[1].total_cmp(&b[1]))
        .then(a[2].total_cmp(&b[2]))
}

/// Mean of the points, summed in lexicographic order so the result does not
/// depend on the input order.
pub fn centroid(points: &[Point]) -> Point {
    let mut sorted = points.to_vec();
    sorted.sort_by(lex);
    let mut c = [0.0; 3];
    for p in &sorted {
        c = add(c, *p);
    }
    scale(c, 1.0 / points.len().max(1) as f64)
}

pub fn centroid_center(cloud: &PointCloud) -> PointCloud {
    let c = centroid(&cloud.points);
    cloud.translated(scale(c, -1.0))
}

/// Index of the best candidate: largest `score`, then lexicographically
/// smallest coordinates, then lowest index.
fn argmax_tiebreak(points: &[Point], score: &[f64], skip: &[bool]) -> usize {
    let mut best = usize::MAX;
    for i in 0..points.len() {
        if skip[i] {
            continue;
        }
        if best == usize::MAX {
            best = i;
            continue;
        }
        let ord = score[i]
            .total_cmp(&score[best])
            .then_with(|| lex(&points[best], &points[i]));
        if ord == Ordering::Greater {
            best = i;
        }
    }
    best
}

/// Deterministic farthest point sampling. The first pick is the point
/// farthest from the centroid; each further pick maximizes the distance to
/// the selected set.
pub fn fps(points: &[Point], n: usize) -> Result<Vec<usize>> {
    if n == 0 || n > points.len() {
        return Err(GeometryError::TooFew {
            op: "fps",
            requested: n,
            available: points.len(),
        });
    }
    let c = centroid(points);
    let mut taken = vec![false; points.len()];
    let from_center: Vec<f64> = points.iter().map(|p| dist2(*p, c)).collect();
    let first = argmax_tiebreak(points, &from_center, &taken);
    let mut picked = vec![first];
    taken[first] = true;
    let mut mind: Vec<f64> = points.iter().map(|p| dist2(*p, points[first])).collect();
    while picked.len() < n {
        let next = argmax_tiebreak(points, &mind, &taken);
        taken[next] = true;
        picked.push(next);
        let q = points[next];
        for (m, p) in mind.iter_mut().zip(points) {
            *m = m.min(dist2(*p, q));
        }
    }
    Ok(picked)
}

/// Fixed-width neighbor lists: row `i` holds `k` key indices for query `i`,
/// nearest first.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Neighborhood {
    pub k: usize,
    pub indices: Vec<usize>,
}

impl Neighborhood {
    pub fn len(&self) -> usize {
        self.indices.len() / self.k.max(1)
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    pub fn row(&self, i: usize) -> &[usize] {
        &self.indices[i * self.k..(i + 1) * self.k]
    }

    /// Every query attends to all keys `0..n`.
    pub fn full(queries: usize, n: usize) -> Self {
        Self {
            k: n,
            indices: (0..queries).flat_map(|_| 0..n).collect(),
        }
    }

    /// Shifts all indices by `offset`, used when clouds are stacked.
    pub fn offset(mut self, offset: usize) -> Self {
        self.indices.iter_mut().for_each(|i| *i += offset);
        self
    }
}

fn nearest_k(q: Point, keys: &[Point], k: usize) -> Vec<usize> {
    let mut cand: Vec<(f64, usize)> = keys.iter().enumerate().map(|(i, p)| (dist2(q, *p), i)).collect();
    let cmp = |a: &(f64, usize), b: &(f64, usize)| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1));
    if k < cand.len() {
        cand.select_nth_unstable_by(k - 1, cmp);
        cand.truncate(k);
    }
    cand.sort_by(cmp);
    cand.into_iter().map(|(_, i)| i).collect()
}

/// Exact k nearest neighbors by brute force; distance ties go to the lower
/// index.
pub fn knn(queries: &[Point], keys: &[Point], k: usize) -> Result<Neighborhood> {
    if k == 0 || k > keys.len() {
        return Err(GeometryError::TooFew {
            op: "knn",
            requested: k,
            available: keys.len(),
        });
    }
    let rows: Vec<Vec<usize>> = if queries.len() * keys.len() > 1 << 16 {
        queries.par_iter().map(|q| nearest_k(*q, keys, k)).collect()
    } else {
        queries.iter().map(|q| nearest_k(*q, keys, k)).collect()
    };
    Ok(Neighborhood {
        k,
        indices: rows.concat(),
    })
}

/// Static 3-d tree for nearest-neighbor queries over large sample sets.
pub struct KdTree {
    points: Vec<Point>,
    /// Node `i` stores the point at `order[i]`; children of the implicit
    /// balanced tree over `order[lo..hi]` sit at the median split.
    order: Vec<usize>,
}

impl KdTree {
    pub fn build(points: &[Point]) -> Self {
        let mut order: Vec<usize> = (0..points.len()).collect();
        Self::split(points, &mut order, 0);
        Self {
            points: points.to_vec(),
            order,
        }
    }

    fn split(points: &[Point], idx: &mut [usize], depth: usize) {
        if idx.len() <= 1 {
            return;
        }
        let axis = depth % 3;
        let mid = idx.len() / 2;
        idx.select_nth_unstable_by(mid, |&a, &b| {
            points[a][axis].total_cmp(&points[b][axis]).then(a.cmp(&b))
        });
        let (left, right) = idx.split_at_mut(mid);
        Self::split(points, left, depth + 1);
        Self::split(points, &mut right[1..], depth + 1);
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// `(index, squared distance)` of the closest stored point; ties go to
    /// the lower index.
    pub fn nearest(&self, q: Point) -> Option<(usize, f64)> {
        if self.points.is_empty() {
            return None;
        }
        let mut best = (usize::MAX, f64::INFINITY);
        self.search(q, 0, self.order.len(), 0, &mut best);
        Some(best)
    }

    fn search(&self, q: Point, lo: usize, hi: usize, depth: usize, best: &mut (usize, f64)) {
        if lo >= hi {
            return;
        }
        let mid = lo + (hi - lo) / 2;
        let i = self.order[mid];
        let p = self.points[i];
        let d = dist2(q, p);
        if d < best.1 || (d == best.1 && i < best.0) {
            *best = (i, d);
        }
        let axis = depth % 3;
        let delta = q[axis] - p[axis];
        let (near, far) = if delta < 0.0 {
            ((lo, mid), (mid + 1, hi))
        } else {
            ((mid + 1, hi), (lo, mid))
        };
        self.search(q, near.0, near.1, depth + 1, best);
        if delta * delta <= best.1 {
            self.search(q, far.0, far.1, depth + 1, best);
        }
    }
}

const BINARY_MAGIC: &[u8; 4] = b"APC1";

/// Text format: one point per line, `x y z [f1 .. fd]`. Blank lines and
/// lines starting with `#` are skipped.
pub fn read_xyz(r: impl Read) -> Result<PointCloud> {
    let mut points = Vec::new();
    let mut features = Vec::new();
    let mut width = None;
    for (ln, line) in std::io::BufReader::new(r).lines().enumerate() {
        let line = line?;
        let t = line.trim();
        if t.is_empty() || t.starts_with('#') {
            continue;
        }
        let vals: Vec<f64> = t
            .split_whitespace()
            .map(|s| s.parse::<f64>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| GeometryError::Invalid(format!("line {}: {e}", ln + 1)))?;
        if vals.len() < 3 || *width.get_or_insert(vals.len()) != vals.len() {
            return Err(GeometryError::Invalid(format!("line {}: bad column count", ln + 1)));
        }
        points.push([vals[0], vals[1], vals[2]]);
        features.extend_from_slice(&vals[3..]);
    }
    PointCloud::with_features(points, width.unwrap_or(3) - 3, features)
}

pub fn write_xyz(cloud: &PointCloud, w: impl Write) -> Result<()> {
    let mut w = BufWriter::new(w);
    let d = cloud.feature_dim;
    for (i, p) in cloud.points.iter().enumerate() {
        write!(w, "{} {} {}", p[0], p[1], p[2])?;
        for f in &cloud.features[i * d..(i + 1) * d] {
            write!(w, " {f}")?;
        }
        writeln!(w)?;
    }
    w.flush()?;
    Ok(())
}

/// Binary format: magic, `N` and `d0` as little-endian `u32`, then `N` rows
/// of `3 + d0` little-endian `f32`.
pub fn write_binary(cloud: &PointCloud, w: impl Write) -> Result<()> {
    let mut w = BufWriter::new(w);
    w.write_all(BINARY_MAGIC)?;
    w.write_all(&(cloud.len() as u32).to_le_bytes())?;
    w.write_all(&(cloud.feature_dim as u32).to_le_bytes())?;
    let d = cloud.feature_dim;
    for (i, p) in cloud.points.iter().enumerate() {
        for v in p.iter().chain(&cloud.features[i * d..(i + 1) * d]) {
            w.write_all(&(*v as f32).to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn read_binary(mut r: impl Read) -> Result<PointCloud> {
    let mut head = [0u8; 12];
    r.read_exact(&mut head)?;
    if &head[..4] != BINARY_MAGIC {
        return Err(GeometryError::Invalid("bad magic".into()));
    }
    let n = u32::from_le_bytes(head[4..8].try_into().unwrap()) as usize;
    let d = u32::from_le_bytes(head[8..12].try_into().unwrap()) as usize;
    let mut buf = vec![0u8; n * (3 + d) * 4];
    r.read_exact(&mut buf)?;
    let vals: Vec<f64> = buf
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
        .collect();
    let mut points = Vec::with_capacity(n);
    let mut features = Vec::with_capacity(n * d);
    for row in vals.chunks_exact(3 + d) {
        points.push([row[0], row[1], row[2]]);
        features.extend_from_slice(&row[3..]);
    }
    PointCloud::with_features(points, d, features)
}

/// Reads either format, chosen by the file's leading magic bytes.
pub fn load_cloud(path: &Path) -> Result<PointCloud> {
    let bytes = std::fs::read(path)?;
    if bytes.starts_with(BINARY_MAGIC) {
        read_binary(bytes.as_slice())
    } else {
        read_xyz(bytes.as_slice())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::RngStream;
    use proptest::prelude::*;

    fn random_cloud(seed: u64, n: usize) -> Vec<Point> {
        let mut r = RngStream::new(seed);
        (0..n)
            .map(|_| [r.next_f64() - 0.5, r.next_f64() - 0.5, r.next_f64() - 0.5])
            .collect()
    }

    #[test]
    fn fps_all_points_covers_everything() {
        let pts = random_cloud(1, 20);
        let mut idx = fps(&pts, 20).unwrap();
        idx.sort();
        assert_eq!(idx, (0..20).collect::<Vec<_>>());
        assert!(fps(&pts, 21).is_err());
        assert!(fps(&pts, 0).is_err());
    }

    #[test]
    fn fps_seed_is_farthest_from_centroid() {
        let pts = vec![[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [10.0, 0.0, 0.0]];
        // Oracle: brute-force scan of distances to the mean.
        let c = [11.0 / 3.0, 0.0, 0.0];
        let want = (0..3)
            .max_by(|&a, &b| dist2(pts[a], c).total_cmp(&dist2(pts[b], c)))
            .unwrap();
        assert_eq!(fps(&pts, 1).unwrap(), vec![want]);
        assert_eq!(want, 2);
    }

    #[test]
    fn fps_square_corners_picks_a_diagonal() {
        let pts = vec![[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [1.0, 1.0, 0.0], [0.0, 1.0, 0.0]];
        let pick = fps(&pts, 2).unwrap();
        let d = dist2(pts[pick[0]], pts[pick[1]]);
        assert_eq!(d, 2.0);
        // All four corners tie; the lexicographically smallest corner wins.
        assert_eq!(pick, vec![0, 2]);
    }

    #[test]
    fn fps_set_is_permutation_invariant() {
        let pts = random_cloud(2, 60);
        let base: Vec<Point> = fps(&pts, 15).unwrap().iter().map(|&i| pts[i]).collect();
        let mut r = RngStream::new(3);
        for _ in 0..5 {
            let mut perm: Vec<usize> = (0..60).collect();
            r.shuffle(&mut perm);
            let shuffled: Vec<Point> = perm.iter().map(|&i| pts[i]).collect();
            let got: Vec<Point> = fps(&shuffled, 15).unwrap().iter().map(|&i| shuffled[i]).collect();
            assert_eq!(got, base);
        }
    }

    #[test]
    fn knn_matches_brute_force() {
        let keys = random_cloud(4, 50);
        let queries = random_cloud(5, 30);
        let nb = knn(&queries, &keys, 7).unwrap();
        for (qi, q) in queries.iter().enumerate() {
            let mut all: Vec<usize> = (0..50).collect();
            all.sort_by(|&a, &b| dist2(*q, keys[a]).partial_cmp(&dist2(*q, keys[b])).unwrap());
            assert_eq!(nb.row(qi), &all[..7]);
        }
        assert!(knn(&queries, &keys, 51).is_err());
    }

    #[test]
    fn knn_full_and_self() {
        let keys = random_cloud(6, 10);
        let nb = knn(&keys, &keys, 10).unwrap();
        for i in 0..10 {
            assert_eq!(nb.row(i)[0], i);
            let d: Vec<f64> = nb.row(i).iter().map(|&j| dist2(keys[i], keys[j])).collect();
            assert!(d.windows(2).all(|w| w[0] <= w[1]));
        }
    }

    #[test]
    fn knn_ties_go_to_lower_index() {
        let keys = vec![[1.0, 0.0, 0.0], [-1.0, 0.0, 0.0], [0.0, 1.0, 0.0]];
        let nb = knn(&[[0.0, 0.0, 0.0]], &keys, 2).unwrap();
        assert_eq!(nb.row(0), &[0, 1]);
    }

    #[test]
    fn centering() {
        let one = PointCloud::new(vec![[0.3, -0.2, 5.0]]).unwrap();
        assert_eq!(centroid_center(&one).points[0], [0.0, 0.0, 0.0]);
        let c = PointCloud::new(random_cloud(7, 100)).unwrap();
        let m = centroid(&centroid_center(&c).points);
        assert!(m.iter().all(|v| v.abs() < 1e-6));
        let sym = PointCloud::new(vec![[1.0, 0.0, 0.0], [-1.0, 0.0, 0.0]]).unwrap();
        assert_eq!(centroid_center(&sym), sym);
    }

    #[test]
    fn kdtree_matches_brute_force() {
        let pts = random_cloud(8, 500);
        let tree = KdTree::build(&pts);
        for q in random_cloud(9, 200) {
            let (i, d) = tree.nearest(q).unwrap();
            let want = (0..pts.len())
                .min_by(|&a, &b| dist2(q, pts[a]).total_cmp(&dist2(q, pts[b])))
                .unwrap();
            assert_eq!(d, dist2(q, pts[want]));
            assert_eq!(i, want);
        }
        assert!(KdTree::build(&[]).nearest([0.0; 3]).is_none());
    }

    #[test]
    fn io_roundtrips() {
        let c = PointCloud::with_features(vec![[0.5, -0.25, 1.0], [2.0, 3.0, 4.0]], 1, vec![7.0, 8.0]).unwrap();
        let mut txt = Vec::new();
        write_xyz(&c, &mut txt).unwrap();
        assert_eq!(String::from_utf8(txt.clone()).unwrap(), "0.5 -0.25 1 7\n2 3 4 8\n");
        assert_eq!(read_xyz(txt.as_slice()).unwrap(), c);
        let mut bin = Vec::new();
        write_binary(&c, &mut bin).unwrap();
        assert_eq!(bin.len(), 12 + 2 * 4 * 4);
        assert_eq!(read_binary(bin.as_slice()).unwrap(), c);
        assert!(read_xyz("1 2\n".as_bytes()).is_err());
        assert!(read_xyz("".as_bytes()).is_err());
    }

    proptest! {
        #[test]
        fn fps_and_knn_are_translation_equivariant(
            seed in 0u64..1000,
            t in prop::array::uniform3(-0.25f64..0.25),
        ) {
            let pts = random_cloud(seed, 40);
            let moved: Vec<Point> = pts.iter().map(|p| add(*p, t)).collect();
            prop_assert_eq!(fps(&pts, 10).unwrap(), fps(&moved, 10).unwrap());
            prop_assert_eq!(knn(&pts, &pts, 5).unwrap(), knn(&moved, &moved, 5).unwrap());
        }

        #[test]
        fn knn_agrees_with_scan(seed in 0u64..1000, k in 1usize..12) {
            let keys = random_cloud(seed, 25);
            let q = random_cloud(seed + 1, 1)[0];
            let nb = knn(&[q], &keys, k).unwrap();
            let mut all: Vec<usize> = (0..25).collect();
            all.sort_by(|&a, &b| dist2(q, keys[a]).total_cmp(&dist2(q, keys[b])).then(a.cmp(&b)));
            prop_assert_eq!(nb.row(0), &all[..k]);
        }
    }
}
