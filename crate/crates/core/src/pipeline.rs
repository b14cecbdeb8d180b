//! End-to-end helpers shared by the command line and the test suites:
//! checkpoints with their model configuration, dataset-level training,
//! reconstruction and evaluation, and result tables.

use crate::decoder::DecoderKind;
use crate::encoder::{ModelError, SetAbsMode};
use crate::extraction::{self, ExtractConfig, ExtractError, TriangleMesh};
use crate::metrics::{self, EvalReport, EvalSettings, MetricError};
use crate::model::{Model, ModelConfig};
use crate::synthdata::ShapeRecord;
use crate::tensor::checkpoint::{Checkpoint, CheckpointError};
use crate::tensor::ParamStore;
use crate::training::{self, FitOutputs, FitResult, TrainConfig, TrainError};
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Extract(#[from] ExtractError),
    #[error(transparent)]
    Metric(#[from] MetricError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error("bad variant '{0}': expected encoder:full:decoder, e.g. ours:3full:ours")]
    Variant(String),
    #[error("checkpoint has no usable model configuration: {0}")]
    MissingConfig(String),
}

pub type Result<T> = std::result::Result<T, PipelineError>;

/// Checkpoint metadata that lets a checkpoint rebuild its own model.
pub fn checkpoint_meta(cfg: &ModelConfig, seed: u64) -> Vec<(String, String)> {
    vec![
        ("model".into(), serde_json::to_string(cfg).expect("config serializes")),
        ("variant".into(), cfg.variant_name()),
        ("seed".into(), seed.to_string()),
    ]
}

pub fn load_checkpoint(path: &Path) -> Result<(Model, ParamStore<f32>, Checkpoint)> {
    let ck = Checkpoint::load(path)?;
    let json = ck.meta("model").ok_or_else(|| PipelineError::MissingConfig("no 'model' record".into()))?;
    let cfg: ModelConfig = serde_json::from_str(json).map_err(|e| PipelineError::MissingConfig(e.to_string()))?;
    let (model, mut params) = Model::new::<f32>(&cfg, 0)?;
    ck.load_into(&mut params)?;
    Ok((model, params, ck))
}

/// Applies a variant label `encoder:full:decoder` to `base`.
pub fn apply_variant(base: &ModelConfig, name: &str) -> Result<ModelConfig> {
    let bad = || PipelineError::Variant(name.to_string());
    let parts: Vec<&str> = name.split(':').collect();
    if parts.len() != 3 {
        return Err(bad());
    }
    let mut cfg = base.clone();
    cfg.encoder.set_abs = match parts[0] {
        "ours" => SetAbsMode::Attentive,
        "PT" => SetAbsMode::Maxpool,
        _ => return Err(bad()),
    };
    cfg.encoder.l2 = match parts[1] {
        "" => 0,
        s => s.strip_suffix("full").and_then(|n| n.parse().ok()).ok_or_else(bad)?,
    };
    cfg.decoder.kind = match parts[2] {
        "ours" => DecoderKind::Attentive,
        "interp" => DecoderKind::Interp,
        _ => return Err(bad()),
    };
    Ok(cfg)
}

/// Every combination of set abstraction, decoder and 0 to 3 full-attention
/// layers.
pub fn all_variants() -> Vec<String> {
    let mut v = Vec::new();
    for enc in ["ours", "PT"] {
        for l2 in 0..=3 {
            for dec in ["ours", "interp"] {
                let full = if l2 == 0 { String::new() } else { format!("{l2}full") };
                v.push(format!("{enc}:{full}:{dec}"));
            }
        }
    }
    v
}

/// Splits `records` 90/10 and trains a freshly initialized (or given)
/// model on them.
pub fn train_model(
    cfg: &ModelConfig,
    model_seed: u64,
    init: Option<ParamStore<f32>>,
    records: &[ShapeRecord],
    train_cfg: &TrainConfig,
    out: FitOutputs<'_>,
) -> Result<(Model, FitResult)> {
    let (model, fresh) = Model::new::<f32>(cfg, model_seed)?;
    let params = init.unwrap_or(fresh);
    let (tr, va) = training::split_indices(records.len());
    let train: Vec<ShapeRecord> = tr.iter().map(|&i| records[i].clone()).collect();
    let val: Vec<ShapeRecord> = va.iter().map(|&i| records[i].clone()).collect();
    let fit = training::fit(&model, params, &train, &val, train_cfg, out)?;
    Ok((model, fit))
}

pub fn reconstruct_all(model: &Model, params: &ParamStore<f32>, records: &[ShapeRecord], cfg: &ExtractConfig) -> Result<Vec<TriangleMesh>> {
    records
        .iter()
        .map(|r| Ok(extraction::reconstruct(model, params, &r.cloud, cfg)?))
        .collect()
}

/// Scores each mesh against its shape. A mesh without surface scores IoU
/// against the empty set and worst-case surface metrics.
pub fn evaluate_all(meshes: &[TriangleMesh], records: &[ShapeRecord], s: &EvalSettings) -> Result<Vec<EvalReport>> {
    meshes
        .iter()
        .zip(records)
        .map(|(m, r)| {
            if m.area() > 0.0 {
                Ok(metrics::evaluate_mesh(m, &r.shape, s)?)
            } else {
                let none = |q: &[crate::geometry::Point]| vec![false; q.len()];
                let gt = |q: &[crate::geometry::Point]| q.iter().map(|p| r.shape.occupied(*p)).collect();
                Ok(EvalReport {
                    iou: metrics::iou(none, gt, s.iou_samples, s.seed),
                    chamfer_l1: f64::INFINITY,
                    normal_consistency: 0.0,
                    f_score: 0.0,
                    iou_samples: s.iou_samples,
                    surface_samples: s.surface_samples,
                    seed: s.seed,
                })
            }
        })
        .collect()
}

/// Fixed-width table with one row per label.
pub fn format_table(rows: &[(String, EvalReport)]) -> String {
    let w = rows.iter().map(|(l, _)| l.len()).max().unwrap_or(0).max(5);
    let mut s = format!("{:<w$}  {:>7}  {:>7}  {:>7}  {:>9}\n", "", "IoU↑", "L1-CD↓", "NC↑", "F-Score↑");
    for (label, r) in rows {
        s.push_str(&format!(
            "{:<w$}  {:>7.4}  {:>7.4}  {:>7.4}  {:>9.4}\n",
            label, r.iou, r.chamfer_l1, r.normal_consistency, r.f_score
        ));
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn variant_names_round_trip() {
        let base = ModelConfig::default();
        for name in all_variants() {
            assert_eq!(apply_variant(&base, &name).unwrap().variant_name(), name);
        }
        assert_eq!(all_variants().len(), 16);
        for bad in ["ours", "x:3full:ours", "ours:3:ours", "ours:3full:ldif"] {
            assert!(apply_variant(&base, bad).is_err(), "{bad}");
        }
    }

    #[test]
    fn checkpoint_rebuilds_model() {
        let mut cfg = ModelConfig::default();
        cfg.encoder.d = 8;
        cfg.encoder.m = 4;
        cfg.encoder.cardinalities = vec![8, 4];
        cfg.decoder.d_dec = 8;
        cfg.decoder.head_width = 8;
        let (_, p) = Model::new::<f32>(&cfg, 3).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        Checkpoint::from_store(&p, checkpoint_meta(&cfg, 3)).save(&path).unwrap();
        let (m, q, ck) = load_checkpoint(&path).unwrap();
        assert_eq!(m.cfg, cfg);
        assert_eq!(ck.meta("variant"), Some("ours:3full:ours"));
        for (a, b) in p.entries().iter().zip(q.entries()) {
            assert_eq!(a.tensor, b.tensor);
        }
    }

    #[test]
    fn table_has_header_and_rows() {
        let r = EvalReport {
            iou: 1.0,
            chamfer_l1: 0.0,
            normal_consistency: 1.0,
            f_score: 1.0,
            iou_samples: 1,
            surface_samples: 1,
            seed: 0,
        };
        let t = format_table(&[("shape_00000".into(), r)]);
        assert_eq!(t.lines().count(), 2);
        assert!(t.contains("IoU↑") && t.contains("1.0000"));
    }
}
