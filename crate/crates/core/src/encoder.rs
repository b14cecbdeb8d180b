//! Point-cloud encoder: a feature-free opening block, attentive downsampling
//! to the anchor set, full-attention blocks over the anchors and a global
//! max-pool head.
//!
//! Several clouds are encoded at once by stacking their rows; neighborhoods
//! never cross cloud boundaries, so only BatchNorm statistics couple the
//! clouds of a batch (and only in training mode).

use crate::attention::{relative_positions, stacked_knn, Ffn, Ptb, Vca};
use crate::geometry::{fps, knn, GeometryError, Neighborhood, Point, PointCloud};
use crate::rng::RngStream;
use crate::tensor::{Ctx, Linear, Mlp, ParamStore, Scalar, Tensor, TensorError, Var};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("invalid input: {0}")]
    Input(String),
}

pub type Result<T> = std::result::Result<T, ModelError>;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SetAbsMode {
    Attentive,
    Maxpool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub d: usize,
    /// Anchor count.
    pub m: usize,
    /// Point counts after each downsampling layer; the last one must be `m`.
    pub cardinalities: Vec<usize>,
    /// Full-attention blocks over the anchors.
    pub l2: usize,
    pub k_enc: usize,
    pub set_abs: SetAbsMode,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            d: 256,
            m: 100,
            cardinalities: vec![200, 100],
            l2: 3,
            k_enc: 16,
            set_abs: SetAbsMode::Attentive,
        }
    }
}

impl EncoderConfig {
    pub fn l1(&self) -> usize {
        self.cardinalities.len()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(ModelError::Config(m));
        if self.d == 0 || self.k_enc == 0 || self.m == 0 {
            return bad("d, m and k_enc must be positive".into());
        }
        if self.cardinalities.last() != Some(&self.m) {
            return bad(format!("last cardinality must equal m = {}", self.m));
        }
        if self.cardinalities.windows(2).any(|w| w[0] <= w[1]) {
            return bad(format!("cardinalities must decrease: {:?}", self.cardinalities));
        }
        Ok(())
    }

    /// Cardinalities for an input of `n` points: each is clamped to the
    /// size of the previous stage.
    pub fn stage_sizes(&self, n: usize) -> Result<Vec<usize>> {
        if n < self.m {
            return Err(ModelError::Input(format!("{n} input points, need at least m = {}", self.m)));
        }
        let mut prev = n;
        Ok(self
            .cardinalities
            .iter()
            .map(|&c| {
                prev = c.min(prev);
                prev
            })
            .collect())
    }
}

/// Anchors, local latents and global latent of one shape.
#[derive(Clone, Debug, PartialEq)]
pub struct ShapeEncoding {
    pub anchors: Vec<Point>,
    /// `[m, d]`.
    pub locals: Tensor<f64>,
    pub global: Vec<f64>,
}

/// Encoder output for a stack of `b` clouds, still on the tape.
pub struct EncodedBatch {
    /// Anchors per cloud.
    pub anchors: Vec<Vec<Point>>,
    /// `[b * m, d]`.
    pub locals: Var,
    /// `[b, d]`.
    pub global: Var,
}

impl EncodedBatch {
    pub fn to_encodings<T: Scalar>(&self, ctx: &Ctx<'_, T>) -> Vec<ShapeEncoding> {
        let locals = ctx.tape.value(self.locals);
        let global = ctx.tape.value(self.global);
        let d = locals.cols();
        let mut row = 0;
        self.anchors
            .iter()
            .enumerate()
            .map(|(b, a)| {
                let m = a.len();
                let l = locals.data()[row * d..(row + m) * d].iter().map(|v| v.as_f64()).collect();
                row += m;
                ShapeEncoding {
                    anchors: a.clone(),
                    locals: Tensor::new(vec![m, d], l).expect("locals shape"),
                    global: global.row(b).iter().map(|v| v.as_f64()).collect(),
                }
            })
            .collect()
    }
}

/// Shared per-neighbor MLP followed by a channel max, over `[features, p_j - p_c]`.
#[derive(Clone, Debug)]
pub struct MaxpoolAbs {
    pub lin_x: Linear,
    pub lin_p: Linear,
    pub out: Linear,
}

#[derive(Clone, Debug)]
pub struct AttentiveAbs {
    pub vca1: Vca,
    pub ffn1: Ffn,
    pub vca2: Vca,
    pub ffn2: Ffn,
}

#[derive(Clone, Debug)]
pub enum SetAbs {
    Attentive(AttentiveAbs),
    Maxpool(MaxpoolAbs),
}

impl SetAbs {
    fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, d: usize, mode: SetAbsMode, rng: &mut RngStream) -> Self {
        match mode {
            SetAbsMode::Attentive => SetAbs::Attentive(AttentiveAbs {
                vca1: Vca::new(store, &format!("{name}.vca1"), Some((d, d)), d, rng),
                ffn1: Ffn::new(store, &format!("{name}.ffn1"), d, rng),
                vca2: Vca::new(store, &format!("{name}.vca2"), Some((d, d)), d, rng),
                ffn2: Ffn::new(store, &format!("{name}.ffn2"), d, rng),
            }),
            SetAbsMode::Maxpool => SetAbs::Maxpool(MaxpoolAbs {
                lin_x: Linear::new(store, &format!("{name}.mlp.x"), d, d, true, rng),
                lin_p: Linear::new(store, &format!("{name}.mlp.p"), 3, d, false, rng),
                out: Linear::new(store, &format!("{name}.mlp.out"), d, d, true, rng),
            }),
        }
    }

    /// Downsamples each stacked cloud to `n_out` points. Returns the central
    /// positions per cloud and their features.
    pub fn forward<T: Scalar>(
        &self,
        ctx: &mut Ctx<'_, T>,
        clouds: &[Vec<Point>],
        x: Var,
        n_out: usize,
        k_enc: usize,
    ) -> Result<(Vec<Vec<Point>>, Var)> {
        let mut centrals = Vec::with_capacity(clouds.len());
        let mut central_rows = Vec::new();
        let mut nbh_idx = Vec::new();
        let mut offset = 0;
        let k = k_enc.min(clouds.iter().map(|c| c.len()).min().unwrap_or(0));
        for c in clouds {
            let idx = fps(c, n_out)?;
            let pc: Vec<Point> = idx.iter().map(|&i| c[i]).collect();
            nbh_idx.extend(knn(&pc, c, k)?.offset(offset).indices);
            central_rows.extend(idx.iter().map(|&i| i + offset));
            centrals.push(pc);
            offset += c.len();
        }
        let nbh = Neighborhood { k, indices: nbh_idx };
        let pq: Vec<Point> = centrals.concat();
        let pkv: Vec<Point> = clouds.concat();
        let y = match self {
            SetAbs::Attentive(a) => {
                let xq = ctx.tape.gather_rows(x, central_rows)?;
                let h = a.vca1.forward(ctx, &pq, Some(xq), &pkv, Some(x), &nbh)?;
                let h = a.ffn1.forward(ctx, h)?;
                let h = a.vca2.forward(ctx, &pq, Some(h), &pkv, Some(x), &nbh)?;
                a.ffn2.forward(ctx, h)?
            }
            SetAbs::Maxpool(mp) => {
                let rel = ctx.constant(relative_positions(&pq, &pkv, &nbh)?)?;
                let xn = ctx.tape.gather_rows(x, nbh.indices.clone())?;
                let hx = mp.lin_x.forward(ctx, xn)?;
                let hp = mp.lin_p.forward(ctx, rel)?;
                let h = ctx.tape.add(hx, hp)?;
                let h = ctx.tape.relu(h)?;
                let h = mp.out.forward(ctx, h)?;
                ctx.tape.group_max(h, k)?
            }
        };
        Ok((centrals, y))
    }
}

#[derive(Clone, Debug)]
pub struct DownLayer {
    pub abs: SetAbs,
    pub ffn_a: Ffn,
    pub ptb: Ptb,
    pub ffn_b: Ffn,
}

#[derive(Clone, Debug)]
pub struct FullLayer {
    pub ptb: Ptb,
    pub ffn: Ffn,
}

#[derive(Clone, Debug)]
pub struct Encoder {
    pub cfg: EncoderConfig,
    pub init: Ptb,
    pub down: Vec<DownLayer>,
    pub full: Vec<FullLayer>,
    pub head: Mlp,
}

impl Encoder {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, cfg: &EncoderConfig, rng: &mut RngStream) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.d;
        let init = Ptb::new(store, "enc.init", d, true, rng);
        let down = (0..cfg.l1())
            .map(|i| {
                let n = format!("enc.down{i}");
                DownLayer {
                    abs: SetAbs::new(store, &format!("{n}.abs"), d, cfg.set_abs, rng),
                    ffn_a: Ffn::new(store, &format!("{n}.ffn_a"), d, rng),
                    ptb: Ptb::new(store, &format!("{n}.ptb"), d, false, rng),
                    ffn_b: Ffn::new(store, &format!("{n}.ffn_b"), d, rng),
                }
            })
            .collect();
        let full = (0..cfg.l2)
            .map(|i| FullLayer {
                ptb: Ptb::new(store, &format!("enc.full{i}.ptb"), d, false, rng),
                ffn: Ffn::new(store, &format!("enc.full{i}.ffn"), d, rng),
            })
            .collect();
        let head = Mlp::new(store, "enc.global", &[d, d, d], rng);
        Ok(Self {
            cfg: cfg.clone(),
            init,
            down,
            full,
            head,
        })
    }

    /// Encodes clouds of equal size as one stacked batch.
    pub fn forward<T: Scalar>(&self, ctx: &mut Ctx<'_, T>, clouds: &[&PointCloud]) -> Result<EncodedBatch> {
        let n = match clouds.first() {
            Some(c) => c.len(),
            None => return Err(ModelError::Input("empty batch".into())),
        };
        if clouds.iter().any(|c| c.len() != n) {
            return Err(ModelError::Input("clouds in a batch must have equal size".into()));
        }
        if clouds.iter().any(|c| c.feature_dim != 0) {
            return Err(ModelError::Input("per-point input features are not supported".into()));
        }
        let sizes = self.cfg.stage_sizes(n)?;
        let k = self.cfg.k_enc.min(n);
        let mut pts: Vec<Vec<Point>> = clouds.iter().map(|c| c.points.clone()).collect();

        let refs: Vec<&[Point]> = pts.iter().map(|p| p.as_slice()).collect();
        let nbh = stacked_knn(&refs, k)?;
        let flat = pts.concat();
        let mut x = self.init.forward(ctx, &flat, None, &nbh)?;

        for (layer, &n_out) in self.down.iter().zip(&sizes) {
            let (centrals, y) = layer.abs.forward(ctx, &pts, x, n_out, self.cfg.k_enc)?;
            pts = centrals;
            let y = layer.ffn_a.forward(ctx, y)?;
            let refs: Vec<&[Point]> = pts.iter().map(|p| p.as_slice()).collect();
            let nbh = stacked_knn(&refs, self.cfg.k_enc.min(n_out))?;
            let flat = pts.concat();
            let y = layer.ptb.forward(ctx, &flat, Some(y), &nbh)?;
            x = layer.ffn_b.forward(ctx, y)?;
        }

        let m = pts[0].len();
        let flat = pts.concat();
        let full = Neighborhood {
            k: m,
            indices: (0..clouds.len())
                .flat_map(|b| Neighborhood::full(m, m).offset(b * m).indices)
                .collect(),
        };
        for layer in &self.full {
            let y = layer.ptb.forward(ctx, &flat, Some(x), &full)?;
            x = layer.ffn.forward(ctx, y)?;
        }

        let pooled = ctx.tape.group_max(x, m)?;
        let global = self.head.forward(ctx, pooled)?;
        Ok(EncodedBatch {
            anchors: pts,
            locals: x,
            global,
        })
    }

}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Mode;

    fn cloud(seed: u64, n: usize) -> PointCloud {
        let mut r = RngStream::new(seed);
        PointCloud::new((0..n).map(|_| [r.next_f64() - 0.5, r.next_f64() - 0.5, r.next_f64() - 0.5]).collect()).unwrap()
    }

    fn small(mode: SetAbsMode) -> EncoderConfig {
        EncoderConfig {
            d: 8,
            m: 6,
            cardinalities: vec![12, 6],
            l2: 1,
            k_enc: 4,
            set_abs: mode,
        }
    }

    fn encode(enc: &Encoder, store: &ParamStore<f64>, c: &PointCloud) -> ShapeEncoding {
        let mut ctx = Ctx::inference(store);
        let out = enc.forward(&mut ctx, &[c]).unwrap();
        out.to_encodings(&ctx).remove(0)
    }

    #[test]
    fn default_shapes() {
        let cfg = EncoderConfig::default();
        let mut store = ParamStore::<f32>::new();
        let enc = Encoder::new(&mut store, &cfg, &mut RngStream::new(0)).unwrap();
        let c = cloud(1, 300);
        let mut ctx = Ctx::inference(&store);
        let out = enc.forward(&mut ctx, &[&c]).unwrap();
        assert_eq!(out.anchors[0].len(), 100);
        assert_eq!(ctx.tape.value(out.locals).shape(), &[100, 256]);
        assert_eq!(ctx.tape.value(out.global).shape(), &[1, 256]);
    }

    #[test]
    fn anchors_are_input_points() {
        for mode in [SetAbsMode::Attentive, SetAbsMode::Maxpool] {
            let mut store = ParamStore::<f64>::new();
            let enc = Encoder::new(&mut store, &small(mode), &mut RngStream::new(0)).unwrap();
            let c = cloud(2, 30);
            let e = encode(&enc, &store, &c);
            assert_eq!(e.anchors.len(), 6);
            assert!(e.anchors.iter().all(|a| c.points.contains(a)));
        }
    }

    #[test]
    fn translation_moves_anchors_only() {
        let mut store = ParamStore::<f64>::new();
        let enc = Encoder::new(&mut store, &small(SetAbsMode::Attentive), &mut RngStream::new(3)).unwrap();
        let c = cloud(4, 30);
        let t = [0.1, -0.05, 0.12];
        let a = encode(&enc, &store, &c);
        let b = encode(&enc, &store, &c.translated(t));
        for (p, q) in a.anchors.iter().zip(&b.anchors) {
            for i in 0..3 {
                assert!((p[i] + t[i] - q[i]).abs() < 1e-12);
            }
        }
        for (x, y) in a.locals.data().iter().zip(b.locals.data()).chain(a.global.iter().zip(&b.global)) {
            assert!((x - y).abs() <= 1e-5 * x.abs().max(1.0));
        }
    }

    #[test]
    fn permutation_invariance() {
        for mode in [SetAbsMode::Attentive, SetAbsMode::Maxpool] {
            let mut store = ParamStore::<f64>::new();
            let enc = Encoder::new(&mut store, &small(mode), &mut RngStream::new(5)).unwrap();
            let c = cloud(6, 30);
            let a = encode(&enc, &store, &c);
            let mut perm: Vec<usize> = (0..30).collect();
            RngStream::new(7).shuffle(&mut perm);
            let b = encode(&enc, &store, &c.permuted(&perm));
            for (i, p) in a.anchors.iter().enumerate() {
                let j = b.anchors.iter().position(|q| q == p).expect("same anchor set");
                for (x, y) in a.locals.row(i).iter().zip(b.locals.row(j)) {
                    assert!((x - y).abs() < 1e-9);
                }
            }
            for (x, y) in a.global.iter().zip(&b.global) {
                assert!((x - y).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn too_few_points_or_bad_config() {
        let mut store = ParamStore::<f64>::new();
        let enc = Encoder::new(&mut store, &small(SetAbsMode::Attentive), &mut RngStream::new(0)).unwrap();
        let mut ctx = Ctx::inference(&store);
        assert!(enc.forward(&mut ctx, &[&cloud(1, 5)]).is_err());
        let mut cfg = small(SetAbsMode::Attentive);
        cfg.cardinalities = vec![6, 12];
        assert!(cfg.validate().is_err());
        cfg.cardinalities = vec![12, 7];
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn cardinalities_clamp_to_input_size() {
        let cfg = small(SetAbsMode::Attentive);
        assert_eq!(cfg.stage_sizes(8).unwrap(), vec![8, 6]);
        let mut store = ParamStore::<f64>::new();
        let enc = Encoder::new(&mut store, &cfg, &mut RngStream::new(0)).unwrap();
        assert_eq!(encode(&enc, &store, &cloud(3, 8)).anchors.len(), 6);
    }

    #[test]
    fn stacked_batch_matches_single_in_eval_mode() {
        let mut store = ParamStore::<f64>::new();
        let enc = Encoder::new(&mut store, &small(SetAbsMode::Attentive), &mut RngStream::new(0)).unwrap();
        let (a, b) = (cloud(10, 20), cloud(11, 20));
        let mut ctx = Ctx::inference(&store);
        let both = enc.forward(&mut ctx, &[&a, &b]).unwrap().to_encodings(&ctx);
        let single = encode(&enc, &store, &b);
        assert_eq!(both[1].anchors, single.anchors);
        for (x, y) in both[1].locals.data().iter().zip(single.locals.data()) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn train_mode_runs_on_a_batch() {
        let mut store = ParamStore::<f32>::new();
        let enc = Encoder::new(&mut store, &small(SetAbsMode::Maxpool), &mut RngStream::new(0)).unwrap();
        let (a, b) = (cloud(12, 20), cloud(13, 20));
        let mut ctx = Ctx::new(&store, Mode::Train);
        let out = enc.forward(&mut ctx, &[&a, &b]).unwrap();
        assert_eq!(ctx.tape.value(out.locals).shape(), &[12, 8]);
        assert!(!ctx.take_stat_updates().is_empty());
    }
}
