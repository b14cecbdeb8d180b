//! The full occupancy network: encoder, decoder and the training objective.

use crate::decoder::{DecodeGroup, Decoder, DecoderConfig, DecoderKind};
use crate::encoder::{Encoder, EncoderConfig, ModelError, Result, SetAbsMode, ShapeEncoding};
use crate::geometry::{Point, PointCloud};
use crate::rng::RngStream;
use crate::tensor::{Ctx, ParamStore, Scalar, Tensor, Var};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

/// Queries decoded per tape during inference.
pub const DECODE_CHUNK: usize = 4096;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    pub decoder: DecoderConfig,
}

impl ModelConfig {
    /// Variant label `encoder:full:decoder`, e.g. `ours:3full:ours` or
    /// `PT::ours` for max-pool set abstraction without full attention.
    pub fn variant_name(&self) -> String {
        let enc = match self.encoder.set_abs {
            SetAbsMode::Attentive => "ours",
            SetAbsMode::Maxpool => "PT",
        };
        let full = match self.encoder.l2 {
            0 => String::new(),
            n => format!("{n}full"),
        };
        let dec = match self.decoder.kind {
            DecoderKind::Attentive => "ours",
            DecoderKind::Interp => "interp",
        };
        format!("{enc}:{full}:{dec}")
    }
}

/// One training item: an input cloud with labelled query points.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub cloud: PointCloud,
    pub queries: Vec<Point>,
    /// 0 outside, 1 inside.
    pub labels: Vec<f64>,
}

#[derive(Clone, Debug)]
pub struct Model {
    pub cfg: ModelConfig,
    pub encoder: Encoder,
    pub decoder: Decoder,
}

pub fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

impl Model {
    /// Builds the module tree and registers freshly initialized parameters.
    pub fn new<T: Scalar>(cfg: &ModelConfig, seed: u64) -> Result<(Self, ParamStore<T>)> {
        let mut store = ParamStore::new();
        let mut rng = RngStream::new(seed).split("init");
        let encoder = Encoder::new(&mut store, &cfg.encoder, &mut rng)?;
        let decoder = Decoder::new(&mut store, &cfg.decoder, cfg.encoder.d, &mut rng)?;
        Ok((
            Self {
                cfg: cfg.clone(),
                encoder,
                decoder,
            },
            store,
        ))
    }

    /// Occupancy logits `[total queries, 1]` for every sample's queries.
    pub fn logits<T: Scalar>(&self, ctx: &mut Ctx<'_, T>, batch: &[Sample]) -> Result<Var> {
        let clouds: Vec<&PointCloud> = batch.iter().map(|s| &s.cloud).collect();
        let enc = self.encoder.forward(ctx, &clouds)?;
        let groups: Vec<DecodeGroup<'_>> = batch
            .iter()
            .zip(&enc.anchors)
            .map(|(s, a)| DecodeGroup {
                anchors: a,
                queries: &s.queries,
            })
            .collect();
        self.decoder.forward(ctx, &groups, enc.locals, enc.global)
    }

    /// Mean binary cross-entropy over all queries of the batch.
    pub fn loss<T: Scalar>(&self, ctx: &mut Ctx<'_, T>, batch: &[Sample]) -> Result<Var> {
        let z = self.logits(ctx, batch)?;
        let labels: Vec<T> = batch.iter().flat_map(|s| s.labels.iter().map(|&y| T::from_f64(y))).collect();
        Ok(ctx.tape.bce_with_logits(z, &labels)?)
    }

    /// Inference-mode encoding of one cloud.
    pub fn encode<T: Scalar>(&self, params: &ParamStore<T>, cloud: &PointCloud) -> Result<ShapeEncoding> {
        let mut ctx = Ctx::inference(params);
        let out = self.encoder.forward(&mut ctx, &[cloud])?;
        Ok(out.to_encodings(&ctx).remove(0))
    }

    fn decode_chunk<T: Scalar>(&self, params: &ParamStore<T>, enc: &ShapeEncoding, queries: &[Point]) -> Result<Vec<f64>> {
        let mut ctx = Ctx::inference(params);
        let locals = ctx.constant(enc.locals.cast())?;
        let d = enc.global.len();
        let global = ctx.constant(Tensor::from_f64(vec![1, d], &enc.global)?)?;
        let groups = [DecodeGroup {
            anchors: &enc.anchors,
            queries,
        }];
        let z = self.decoder.forward(&mut ctx, &groups, locals, global)?;
        Ok(ctx.tape.value(z).data().iter().map(|v| sigmoid(v.as_f64())).collect())
    }

    /// Occupancy probabilities at `queries`, in order. Chunks of
    /// [`DECODE_CHUNK`] queries are evaluated in parallel.
    pub fn decode<T: Scalar>(&self, params: &ParamStore<T>, enc: &ShapeEncoding, queries: &[Point]) -> Result<Vec<f64>> {
        if queries.is_empty() {
            return Ok(Vec::new());
        }
        let parts: Vec<Vec<f64>> = queries
            .par_chunks(DECODE_CHUNK)
            .map(|c| self.decode_chunk(params, enc, c))
            .collect::<Result<_>>()?;
        let out = parts.concat();
        if out.iter().any(|v| !v.is_finite()) {
            return Err(ModelError::Input("non-finite occupancy".into()));
        }
        Ok(out)
    }
}
