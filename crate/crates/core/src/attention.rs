//! Vector attention on point sets.
//!
//! [`Vca`] computes, for every query `i` and neighbor `j`,
//!
//! ```text
//! s_ij = gamma(F_q[i] - F_k[j] + delta(p_i - p_j))
//! v_ij = F_kv[j] W_v + delta(p_i - p_j)
//! x'_i = sum_j softmax_j(s_ij) * v_ij        (softmax per channel)
//! ```
//!
//! In feature-free mode only the `delta` terms remain. Positions enter only
//! through differences, so the operator is translation invariant in its
//! features.

use crate::geometry::{knn, Neighborhood, Point};
use crate::rng::RngStream;
use crate::tensor::{BatchNorm, Ctx, Linear, Mlp, ParamStore, Result, Scalar, Tensor, TensorError, Var};

/// Relative positions `p_q[i] - p_kv[j]` for every neighbor pair, row-major
/// `[queries * k, 3]`.
pub fn relative_positions<T: Scalar>(pq: &[Point], pkv: &[Point], nbh: &Neighborhood) -> Result<Tensor<T>> {
    if nbh.len() != pq.len() {
        return Err(crate::tensor::mismatch("vca", pq.len(), nbh.len()));
    }
    let mut rel = Vec::with_capacity(nbh.indices.len() * 3);
    for (i, p) in pq.iter().enumerate() {
        for &j in nbh.row(i) {
            let q = pkv.get(j).ok_or(TensorError::IndexOutOfRange {
                op: "vca",
                index: j,
                len: pkv.len(),
            })?;
            rel.extend([p[0] - q[0], p[1] - q[1], p[2] - q[2]].map(T::from_f64));
        }
    }
    Tensor::new(vec![nbh.indices.len(), 3], rel)
}

/// Each query index repeated `k` times, to line query rows up with their
/// neighbor rows.
pub fn repeat_each(n: usize, k: usize) -> Vec<usize> {
    (0..n).flat_map(|i| std::iter::repeat_n(i, k)).collect()
}

#[derive(Clone, Debug)]
pub struct VcaProjections {
    pub wq: Linear,
    pub wk: Linear,
    pub wv: Linear,
}

/// Vector cross attention.
#[derive(Clone, Debug)]
pub struct Vca {
    pub d: usize,
    /// `None` in feature-free mode.
    pub proj: Option<VcaProjections>,
    /// Positional encoding `3 -> d -> d`.
    pub delta: Mlp,
    /// Similarity map `d -> d -> d`.
    pub gamma: Mlp,
}

impl Vca {
    /// `dims = Some((d_q, d_kv))` for feature-based attention, `None` for the
    /// feature-free variant.
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        dims: Option<(usize, usize)>,
        d: usize,
        rng: &mut RngStream,
    ) -> Self {
        let proj = dims.map(|(dq, dkv)| VcaProjections {
            wq: Linear::new(store, &format!("{name}.wq"), dq, d, false, rng),
            wk: Linear::new(store, &format!("{name}.wk"), dkv, d, false, rng),
            wv: Linear::new(store, &format!("{name}.wv"), dkv, d, false, rng),
        });
        Self {
            d,
            proj,
            delta: Mlp::new(store, &format!("{name}.delta"), &[3, d, d], rng),
            gamma: Mlp::new(store, &format!("{name}.gamma"), &[d, d, d], rng),
        }
    }

    pub fn feature_free(&self) -> bool {
        self.proj.is_none()
    }

    /// `delta` of the relative positions of every neighbor pair.
    pub fn position_encoding<T: Scalar>(
        &self,
        ctx: &mut Ctx<'_, T>,
        pq: &[Point],
        pkv: &[Point],
        nbh: &Neighborhood,
    ) -> Result<Var> {
        let rel = ctx.constant(relative_positions(pq, pkv, nbh)?)?;
        self.delta.forward(ctx, rel)
    }

    /// Softmax over the `k` rows of each query and weighted sum of values;
    /// `scores_in` and `values` are `[queries * k, d]`.
    pub fn aggregate<T: Scalar>(&self, ctx: &mut Ctx<'_, T>, scores_in: Var, values: Var, k: usize) -> Result<Var> {
        let s = self.gamma.forward(ctx, scores_in)?;
        let a = ctx.tape.channel_softmax(s, k)?;
        let w = ctx.tape.mul(a, values)?;
        ctx.tape.group_sum(w, k)
    }

    pub fn forward<T: Scalar>(
        &self,
        ctx: &mut Ctx<'_, T>,
        pq: &[Point],
        xq: Option<Var>,
        pkv: &[Point],
        xkv: Option<Var>,
        nbh: &Neighborhood,
    ) -> Result<Var> {
        let dlt = self.position_encoding(ctx, pq, pkv, nbh)?;
        let (s_in, v) = match (&self.proj, xq, xkv) {
            (None, _, _) => (dlt, dlt),
            (Some(p), Some(xq), Some(xkv)) => {
                let fq = p.wq.forward(ctx, xq)?;
                let fk = p.wk.forward(ctx, xkv)?;
                let fv = p.wv.forward(ctx, xkv)?;
                let fq = ctx.tape.gather_rows(fq, repeat_each(pq.len(), nbh.k))?;
                let fk = ctx.tape.gather_rows(fk, nbh.indices.clone())?;
                let fv = ctx.tape.gather_rows(fv, nbh.indices.clone())?;
                let diff = ctx.tape.sub(fq, fk)?;
                (ctx.tape.add(diff, dlt)?, ctx.tape.add(fv, dlt)?)
            }
            _ => {
                return Err(TensorError::Invalid {
                    op: "vca",
                    msg: "feature-based attention needs query and key-value features".into(),
                })
            }
        };
        self.aggregate(ctx, s_in, v, nbh.k)
    }
}

/// Neighborhoods of several stacked clouds: `k` nearest within each cloud,
/// with indices into the stacked rows.
pub fn stacked_knn(clouds: &[&[Point]], k: usize) -> std::result::Result<Neighborhood, crate::geometry::GeometryError> {
    let mut indices = Vec::new();
    let mut offset = 0;
    for c in clouds {
        indices.extend(knn(c, c, k)?.offset(offset).indices);
        offset += c.len();
    }
    Ok(Neighborhood { k, indices })
}

/// `BN(X + VSA(X))`, or `BN(VSA(P))` for the feature-free variant that opens
/// the encoder. Positions pass through untouched.
#[derive(Clone, Debug)]
pub struct Ptb {
    pub vca: Vca,
    pub bn: BatchNorm,
}

impl Ptb {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, d: usize, feature_free: bool, rng: &mut RngStream) -> Self {
        let dims = (!feature_free).then_some((d, d));
        Self {
            vca: Vca::new(store, &format!("{name}.vsa"), dims, d, rng),
            bn: BatchNorm::new(store, &format!("{name}.bn"), d),
        }
    }

    /// `points` are the stacked positions, `nbh` self-neighborhoods over them.
    pub fn forward<T: Scalar>(
        &self,
        ctx: &mut Ctx<'_, T>,
        points: &[Point],
        x: Option<Var>,
        nbh: &Neighborhood,
    ) -> Result<Var> {
        let y = self.vca.forward(ctx, points, x, points, x, nbh)?;
        let y = match x {
            Some(x) if !self.vca.feature_free() => ctx.tape.add(x, y)?,
            _ => y,
        };
        self.bn.forward(ctx, y)
    }
}

/// Position-wise feed-forward block `BN(H + MLP(H))` with a `d -> d -> d` MLP.
#[derive(Clone, Debug)]
pub struct Ffn {
    pub mlp: Mlp,
    pub bn: BatchNorm,
}

impl Ffn {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, d: usize, rng: &mut RngStream) -> Self {
        Self {
            mlp: Mlp::new(store, &format!("{name}.mlp"), &[d, d, d], rng),
            bn: BatchNorm::new(store, &format!("{name}.bn"), d),
        }
    }

    pub fn forward<T: Scalar>(&self, ctx: &mut Ctx<'_, T>, h: Var) -> Result<Var> {
        let m = self.mlp.forward(ctx, h)?;
        let s = ctx.tape.add(h, m)?;
        self.bn.forward(ctx, s)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Mode;
    use crate::testutil::{kink_diff, max_rel_err, uniform_pm1};

    fn rand_points(rng: &mut RngStream, n: usize) -> Vec<Point> {
        (0..n).map(|_| [rng.next_f64() - 0.5, rng.next_f64() - 0.5, rng.next_f64() - 0.5]).collect()
    }

    fn feat(rng: &mut RngStream, n: usize, d: usize) -> Tensor<f64> {
        Tensor::new(vec![n, d], uniform_pm1(rng, n * d)).unwrap()
    }

    fn relu(v: &[f64]) -> Vec<f64> {
        v.iter().map(|x| x.max(0.0)).collect()
    }

    /// Row vector times matrix, plus optional bias.
    fn affine(x: &[f64], w: &Tensor<f64>, b: Option<&Tensor<f64>>) -> Vec<f64> {
        let (din, dout) = (w.shape()[0], w.shape()[1]);
        (0..dout)
            .map(|o| {
                let s: f64 = (0..din).map(|i| x[i] * w.data()[i * dout + o]).sum();
                s + b.map_or(0.0, |b| b.data()[o])
            })
            .collect()
    }

    fn mlp2(store: &ParamStore<f64>, m: &Mlp, x: &[f64]) -> Vec<f64> {
        let l0 = &m.layers[0];
        let l1 = &m.layers[1];
        let h = relu(&affine(x, store.get(l0.w), l0.b.map(|b| store.get(b))));
        affine(&h, store.get(l1.w), l1.b.map(|b| store.get(b)))
    }

    /// Straight-line evaluation of the attention formulas, one query at a time.
    fn oracle(
        store: &ParamStore<f64>,
        vca: &Vca,
        pq: &[Point],
        xq: &Tensor<f64>,
        pkv: &[Point],
        xkv: &Tensor<f64>,
        nbh: &Neighborhood,
    ) -> Vec<Vec<f64>> {
        let p = vca.proj.as_ref().unwrap();
        let d = vca.d;
        (0..pq.len())
            .map(|i| {
                let fq = affine(xq.row(i), store.get(p.wq.w), None);
                let mut scores = Vec::new();
                let mut values = Vec::new();
                for &j in nbh.row(i) {
                    let rel = [pq[i][0] - pkv[j][0], pq[i][1] - pkv[j][1], pq[i][2] - pkv[j][2]];
                    let dl = mlp2(store, &vca.delta, &rel);
                    let fk = affine(xkv.row(j), store.get(p.wk.w), None);
                    let fv = affine(xkv.row(j), store.get(p.wv.w), None);
                    let sin: Vec<f64> = (0..d).map(|c| fq[c] - fk[c] + dl[c]).collect();
                    scores.push(mlp2(store, &vca.gamma, &sin));
                    values.push((0..d).map(|c| fv[c] + dl[c]).collect::<Vec<_>>());
                }
                (0..d)
                    .map(|c| {
                        let z: f64 = scores.iter().map(|s| s[c].exp()).sum();
                        scores.iter().zip(&values).map(|(s, v)| s[c].exp() / z * v[c]).sum()
                    })
                    .collect()
            })
            .collect()
    }

    fn eval_vca(
        store: &ParamStore<f64>,
        vca: &Vca,
        pq: &[Point],
        xq: Option<&Tensor<f64>>,
        pkv: &[Point],
        xkv: Option<&Tensor<f64>>,
        nbh: &Neighborhood,
    ) -> Tensor<f64> {
        let mut ctx = Ctx::inference(store);
        let xq = xq.map(|t| ctx.constant(t.clone()).unwrap());
        let xkv = xkv.map(|t| ctx.constant(t.clone()).unwrap());
        let y = vca.forward(&mut ctx, pq, xq, pkv, xkv, nbh).unwrap();
        ctx.tape.value(y).clone()
    }

    /// Random biases so that every parameter contributes to the oracle check.
    fn perturb(store: &mut ParamStore<f64>, rng: &mut RngStream) {
        for e in store.entries_mut() {
            if e.name.ends_with(".b") {
                let n = e.tensor.len();
                e.tensor.data_mut().copy_from_slice(&uniform_pm1(rng, n));
            }
        }
    }

    #[test]
    fn matches_scripted_oracle() {
        let mut rng = RngStream::new(1);
        let mut store = ParamStore::<f64>::new();
        let vca = Vca::new(&mut store, "a", Some((3, 5)), 4, &mut rng);
        perturb(&mut store, &mut rng);
        let pq = rand_points(&mut rng, 2);
        let pkv = rand_points(&mut rng, 3);
        let xq = feat(&mut rng, 2, 3);
        let xkv = feat(&mut rng, 3, 5);
        let nbh = knn(&pq, &pkv, 2).unwrap();
        let got = eval_vca(&store, &vca, &pq, Some(&xq), &pkv, Some(&xkv), &nbh);
        let want = oracle(&store, &vca, &pq, &xq, &pkv, &xkv, &nbh);
        for i in 0..2 {
            for c in 0..4 {
                assert!((got.row(i)[c] - want[i][c]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn single_neighbor_returns_its_value() {
        let mut rng = RngStream::new(2);
        let mut store = ParamStore::<f64>::new();
        let vca = Vca::new(&mut store, "a", Some((4, 4)), 4, &mut rng);
        let p = rand_points(&mut rng, 3);
        let x = feat(&mut rng, 3, 4);
        let nbh = knn(&p, &p, 1).unwrap();
        let got = eval_vca(&store, &vca, &p, Some(&x), &p, Some(&x), &nbh);
        let pr = vca.proj.as_ref().unwrap();
        let dl0 = mlp2(&store, &vca.delta, &[0.0, 0.0, 0.0]);
        for i in 0..3 {
            let v = affine(x.row(i), store.get(pr.wv.w), None);
            for c in 0..4 {
                assert!((got.row(i)[c] - (v[c] + dl0[c])).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn feature_free_colocated_query_gives_delta_of_zero() {
        let mut rng = RngStream::new(3);
        let mut store = ParamStore::<f64>::new();
        let vca = Vca::new(&mut store, "a", None, 4, &mut rng);
        perturb(&mut store, &mut rng);
        let p = rand_points(&mut rng, 5);
        let nbh = knn(&p, &p, 1).unwrap();
        let got = eval_vca(&store, &vca, &p, None, &p, None, &nbh);
        let dl0 = mlp2(&store, &vca.delta, &[0.0, 0.0, 0.0]);
        for i in 0..5 {
            assert_eq!(got.row(i), got.row(0));
            for c in 0..4 {
                assert!((got.row(i)[c] - dl0[c]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn translation_leaves_features_unchanged() {
        let mut rng = RngStream::new(4);
        let mut store = ParamStore::<f64>::new();
        let vca = Vca::new(&mut store, "a", Some((4, 4)), 4, &mut rng);
        let p = rand_points(&mut rng, 12);
        let x = feat(&mut rng, 12, 4);
        let nbh = knn(&p, &p, 4).unwrap();
        let base = eval_vca(&store, &vca, &p, Some(&x), &p, Some(&x), &nbh);
        let t = [0.13, -0.07, 0.11];
        let moved: Vec<Point> = p.iter().map(|q| crate::geometry::add(*q, t)).collect();
        let nbh2 = knn(&moved, &moved, 4).unwrap();
        assert_eq!(nbh, nbh2);
        let shifted = eval_vca(&store, &vca, &moved, Some(&x), &moved, Some(&x), &nbh2);
        for (a, b) in base.data().iter().zip(shifted.data()) {
            assert!((a - b).abs() <= 1e-6 * a.abs().max(1.0));
        }
    }

    #[test]
    fn permutation_permutes_rows() {
        let mut rng = RngStream::new(5);
        let mut store = ParamStore::<f64>::new();
        let vca = Vca::new(&mut store, "a", Some((4, 4)), 4, &mut rng);
        let p = rand_points(&mut rng, 10);
        let x = feat(&mut rng, 10, 4);
        let nbh = knn(&p, &p, 3).unwrap();
        let base = eval_vca(&store, &vca, &p, Some(&x), &p, Some(&x), &nbh);
        let mut perm: Vec<usize> = (0..10).collect();
        rng.shuffle(&mut perm);
        let pp: Vec<Point> = perm.iter().map(|&i| p[i]).collect();
        let xp = Tensor::new(vec![10, 4], perm.iter().flat_map(|&i| x.row(i).to_vec()).collect()).unwrap();
        let nbp = knn(&pp, &pp, 3).unwrap();
        let got = eval_vca(&store, &vca, &pp, Some(&xp), &pp, Some(&xp), &nbp);
        for (r, &i) in perm.iter().enumerate() {
            for c in 0..4 {
                assert!((got.row(r)[c] - base.row(i)[c]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn output_depends_only_on_neighbors() {
        let mut rng = RngStream::new(6);
        let mut store = ParamStore::<f64>::new();
        let vca = Vca::new(&mut store, "a", Some((4, 4)), 4, &mut rng);
        let p = rand_points(&mut rng, 10);
        let x = feat(&mut rng, 10, 4);
        let nbh = knn(&p, &p, 3).unwrap();
        let base = eval_vca(&store, &vca, &p, Some(&x), &p, Some(&x), &nbh);
        let outside = (0..10).find(|j| !nbh.row(0).contains(j)).unwrap();
        let mut xz = x.clone();
        xz.data_mut()[outside * 4..outside * 4 + 4].fill(0.0);
        let got = eval_vca(&store, &vca, &p, Some(&x), &p, Some(&xz), &nbh);
        assert_eq!(got.row(0), base.row(0));
    }

    #[test]
    fn ptb_eval_identity_bn_is_residual() {
        let mut rng = RngStream::new(7);
        let mut store = ParamStore::<f64>::new();
        let ptb = Ptb::new(&mut store, "p", 4, false, &mut rng);
        let p = rand_points(&mut rng, 6);
        let x = feat(&mut rng, 6, 4);
        let nbh = knn(&p, &p, 3).unwrap();
        let vsa = eval_vca(&store, &ptb.vca, &p, Some(&x), &p, Some(&x), &nbh);
        let mut ctx = Ctx::inference(&store);
        let xv = ctx.constant(x.clone()).unwrap();
        let y = ptb.forward(&mut ctx, &p, Some(xv), &nbh).unwrap();
        let y = ctx.tape.value(y);
        for i in 0..24 {
            let want = x.data()[i] + vsa.data()[i];
            assert!((y.data()[i] - want).abs() < 1e-4 * want.abs().max(1.0));
        }
    }

    #[test]
    fn ptb_gradients_match_finite_differences() {
        let mut rng = RngStream::new(8);
        let mut store = ParamStore::<f64>::new();
        let ptb = Ptb::new(&mut store, "p", 4, false, &mut rng);
        let p = rand_points(&mut rng, 6);
        let x = uniform_pm1(&mut rng, 24);
        let w = uniform_pm1(&mut rng, 24);
        let nbh = knn(&p, &p, 3).unwrap();
        let loss = |store: &ParamStore<f64>, xs: &[f64]| {
            let mut ctx = Ctx::new(store, Mode::Train);
            let xv = ctx.tape.leaf(Tensor::new(vec![6, 4], xs.to_vec()).unwrap(), true).unwrap();
            let y = ptb.forward(&mut ctx, &p, Some(xv), &nbh).unwrap();
            let wv = ctx.constant(Tensor::new(vec![6, 4], w.clone()).unwrap()).unwrap();
            let m = ctx.tape.mul(y, wv).unwrap();
            let l = ctx.tape.sum(m).unwrap();
            let g = ctx.tape.backward(l).unwrap();
            let sig = ctx.tape.kink_signature();
            ((ctx.tape.value(l).data()[0], sig), g.get(xv).to_f64_vec(), ctx.param_grads(&g))
        };
        let (_, gx, gp) = loss(&store, &x);
        let fd = kink_diff(|xs| loss(&store, xs).0, &x, 1e-5);
        assert!(max_rel_err(&gx, &fd) < 1e-4, "input grad");
        for id in store.ids().collect::<Vec<_>>() {
            if !store.entries()[id.index()].trainable {
                continue;
            }
            let theta = store.get(id).to_f64_vec();
            let fd = kink_diff(
                |v| {
                    let mut s = store.clone();
                    s.get_mut(id).data_mut().copy_from_slice(v);
                    loss(&s, &x).0
                },
                &theta,
                1e-5,
            );
            let an = gp[id.index()].as_ref().map(|t| t.to_f64_vec()).unwrap_or(vec![0.0; theta.len()]);
            let e = max_rel_err(&an, &fd);
            assert!(e < 1e-4, "{}: {e}", store.entries()[id.index()].name);
        }
    }
}
