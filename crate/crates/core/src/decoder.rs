//! Occupancy decoder.
//!
//! The attentive decoder queries the `k_dec` anchors nearest to a point,
//! plus one global token carrying the global latent, with a single vector
//! cross attention whose query features are the global latent. The global
//! token has no position, so its score and value carry no positional term.
//! The resulting feature passes through a residual fully-connected head to
//! an occupancy logit.

use crate::attention::{repeat_each, Vca};
use crate::encoder::{ModelError, Result};
use crate::geometry::{dist2, knn, Neighborhood, Point};
use crate::rng::RngStream;
use crate::tensor::{Ctx, Linear, ParamStore, Scalar, Tensor, Var};
use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DecoderKind {
    Attentive,
    Interp,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecoderConfig {
    pub k_dec: usize,
    pub d_dec: usize,
    pub head_blocks: usize,
    pub head_width: usize,
    pub threshold: f64,
    pub kind: DecoderKind,
}

impl Default for DecoderConfig {
    fn default() -> Self {
        Self {
            k_dec: 7,
            d_dec: 200,
            head_blocks: 5,
            head_width: 128,
            threshold: 0.5,
            kind: DecoderKind::Attentive,
        }
    }
}

impl DecoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k_dec == 0 || self.d_dec == 0 || self.head_width == 0 {
            return Err(ModelError::Config("k_dec, d_dec and head_width must be positive".into()));
        }
        if !(self.threshold > 0.0 && self.threshold < 1.0) {
            return Err(ModelError::Config(format!("threshold {} outside (0, 1)", self.threshold)));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct ResBlock {
    pub fc0: Linear,
    pub fc1: Linear,
}

/// Residual occupancy head: `h = W_in z`, then `h += fc1(relu(fc0(relu(h))))`
/// per block, then `logit = W_out relu(h)`.
#[derive(Clone, Debug)]
pub struct OccupancyHead {
    pub input: Linear,
    pub blocks: Vec<ResBlock>,
    pub out: Linear,
}

impl OccupancyHead {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        d_in: usize,
        width: usize,
        blocks: usize,
        rng: &mut RngStream,
    ) -> Self {
        Self {
            input: Linear::new(store, &format!("{name}.in"), d_in, width, true, rng),
            blocks: (0..blocks)
                .map(|i| ResBlock {
                    fc0: Linear::new(store, &format!("{name}.block{i}.fc0"), width, width, true, rng),
                    fc1: Linear::new(store, &format!("{name}.block{i}.fc1"), width, width, true, rng),
                })
                .collect(),
            out: Linear::new(store, &format!("{name}.out"), width, 1, true, rng),
        }
    }

    /// Runs the head from an already projected hidden state.
    pub fn from_hidden<T: Scalar>(&self, ctx: &mut Ctx<'_, T>, mut h: Var) -> Result<Var> {
        for b in &self.blocks {
            let a = ctx.tape.relu(h)?;
            let a = b.fc0.forward(ctx, a)?;
            let a = ctx.tape.relu(a)?;
            let a = b.fc1.forward(ctx, a)?;
            h = ctx.tape.add(h, a)?;
        }
        let a = ctx.tape.relu(h)?;
        Ok(self.out.forward(ctx, a)?)
    }

    pub fn forward<T: Scalar>(&self, ctx: &mut Ctx<'_, T>, z: Var) -> Result<Var> {
        let h = self.input.forward(ctx, z)?;
        self.from_hidden(ctx, h)
    }
}

#[derive(Clone, Debug)]
pub enum DecoderBody {
    Attentive(Vca),
    /// Inverse-distance interpolation of the nearest locals; the global
    /// latent and the weighted query offset from those anchors enter
    /// through their own projections into the head.
    Interp { global_proj: Linear, offset_proj: Linear },
}

#[derive(Clone, Debug)]
pub struct Decoder {
    pub cfg: DecoderConfig,
    pub body: DecoderBody,
    pub head: OccupancyHead,
}

/// Normalized inverse-distance weights `1 / (dist + 1e-9)`.
pub fn idw_weights(q: Point, anchors: &[Point]) -> Vec<f64> {
    let w: Vec<f64> = anchors.iter().map(|a| 1.0 / (dist2(q, *a).sqrt() + 1e-9)).collect();
    let s: f64 = w.iter().sum();
    w.into_iter().map(|v| v / s).collect()
}

/// Queries of one shape together with that shape's anchors.
pub struct DecodeGroup<'a> {
    pub anchors: &'a [Point],
    pub queries: &'a [Point],
}

impl Decoder {
    /// `d` is the encoder width (locals and global latent).
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, cfg: &DecoderConfig, d: usize, rng: &mut RngStream) -> Result<Self> {
        cfg.validate()?;
        let (body, head_in) = match cfg.kind {
            DecoderKind::Attentive => (
                DecoderBody::Attentive(Vca::new(store, "dec.vca", Some((d, d)), cfg.d_dec, rng)),
                cfg.d_dec,
            ),
            DecoderKind::Interp => (
                DecoderBody::Interp {
                    global_proj: Linear::new(store, "dec.global_proj", d, cfg.head_width, false, rng),
                    offset_proj: Linear::new(store, "dec.offset_proj", 3, cfg.head_width, false, rng),
                },
                d,
            ),
        };
        let head = OccupancyHead::new(store, "dec.head", head_in, cfg.head_width, cfg.head_blocks, rng);
        Ok(Self {
            cfg: cfg.clone(),
            body,
            head,
        })
    }

    /// Occupancy logits `[total queries, 1]` for query groups that index the
    /// stacked `locals` (`[b * m, d]`) and `global` (`[b, d]`) rows.
    pub fn forward<T: Scalar>(
        &self,
        ctx: &mut Ctx<'_, T>,
        groups: &[DecodeGroup<'_>],
        locals: Var,
        global: Var,
    ) -> Result<Var> {
        let mut nb_idx = Vec::new();
        let mut shape_of = Vec::new();
        let mut queries = Vec::new();
        let mut anchors = Vec::new();
        let mut k = usize::MAX;
        for g in groups {
            k = k.min(self.cfg.k_dec.min(g.anchors.len()));
        }
        if groups.is_empty() || k == 0 || k == usize::MAX {
            return Err(ModelError::Input("nothing to decode".into()));
        }
        for (b, g) in groups.iter().enumerate() {
            let nb = knn(g.queries, g.anchors, k)?;
            nb_idx.extend(nb.offset(anchors.len()).indices);
            shape_of.extend(std::iter::repeat_n(b, g.queries.len()));
            queries.extend_from_slice(g.queries);
            anchors.extend_from_slice(g.anchors);
        }
        let t = queries.len();
        let nbh = Neighborhood { k, indices: nb_idx };
        match &self.body {
            DecoderBody::Attentive(vca) => {
                let p = vca.proj.as_ref().expect("decoder attention uses features");
                let dlt = vca.position_encoding(ctx, &queries, &anchors, &nbh)?;
                let fq = p.wq.forward(ctx, global)?;
                let fk = p.wk.forward(ctx, locals)?;
                let fv = p.wv.forward(ctx, locals)?;
                let fk_glob = p.wk.forward(ctx, global)?;
                let fv_glob = p.wv.forward(ctx, global)?;

                let q_rows: Vec<usize> = repeat_each(t, k).into_iter().map(|i| shape_of[i]).collect();
                let fq_rep = ctx.tape.gather_rows(fq, q_rows)?;
                let fk_n = ctx.tape.gather_rows(fk, nbh.indices.clone())?;
                let s = ctx.tape.sub(fq_rep, fk_n)?;
                let s_anchor = ctx.tape.add(s, dlt)?;
                let fv_n = ctx.tape.gather_rows(fv, nbh.indices.clone())?;
                let v_anchor = ctx.tape.add(fv_n, dlt)?;

                let sg = ctx.tape.sub(fq, fk_glob)?;
                let s_glob = ctx.tape.gather_rows(sg, shape_of.clone())?;
                let v_glob = ctx.tape.gather_rows(fv_glob, shape_of.clone())?;

                // Interleave so each query owns k anchor rows then its global row.
                let order: Vec<usize> = (0..t)
                    .flat_map(|i| (i * k..(i + 1) * k).chain(std::iter::once(t * k + i)))
                    .collect();
                let s_all = ctx.tape.concat_rows(&[s_anchor, s_glob])?;
                let s_all = ctx.tape.gather_rows(s_all, order.clone())?;
                let v_all = ctx.tape.concat_rows(&[v_anchor, v_glob])?;
                let v_all = ctx.tape.gather_rows(v_all, order)?;
                let z = vca.aggregate(ctx, s_all, v_all, k + 1)?;
                self.head.forward(ctx, z)
            }
            DecoderBody::Interp { global_proj, offset_proj } => {
                let mut w = Vec::with_capacity(t * k);
                let mut off = Vec::with_capacity(t * 3);
                for (i, q) in queries.iter().enumerate() {
                    let near: Vec<Point> = nbh.row(i).iter().map(|&j| anchors[j]).collect();
                    let wi = idw_weights(*q, &near);
                    let mut o = [0.0; 3];
                    for (a, wa) in near.iter().zip(&wi) {
                        for c in 0..3 {
                            o[c] += wa * (q[c] - a[c]);
                        }
                    }
                    off.extend(o.map(T::from_f64));
                    w.extend(wi.into_iter().map(T::from_f64));
                }
                let z = ctx.tape.gather_rows(locals, nbh.indices.clone())?;
                let z = ctx.tape.scale_rows(z, w)?;
                let z = ctx.tape.group_sum(z, k)?;
                let h = self.head.input.forward(ctx, z)?;
                let g = global_proj.forward(ctx, global)?;
                let g = ctx.tape.gather_rows(g, shape_of)?;
                let h = ctx.tape.add(h, g)?;
                let off = ctx.constant(Tensor::new(vec![t, 3], off)?)?;
                let o = offset_proj.forward(ctx, off)?;
                let h = ctx.tape.add(h, o)?;
                self.head.from_hidden(ctx, h)
            }
        }
    }

}
