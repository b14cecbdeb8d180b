//! Mini-batch training with binary cross-entropy on sampled query points.

use crate::encoder::ModelError;
use crate::model::{Model, Sample};
use crate::rng::{hash64, RngStream};
use crate::synthdata::ShapeRecord;
use crate::tensor::checkpoint::{Checkpoint, CheckpointError};
use crate::tensor::{Adam, Ctx, Mode, ParamStore};
use std::io::Write;
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error("invalid training configuration: {0}")]
    Config(String),
    #[error("non-finite loss at epoch {epoch}, step {step}")]
    NonFinite { epoch: usize, step: usize },
    #[error("labels must be 0 or 1")]
    Labels,
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, TrainError>;

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub batch_size: usize,
    /// Query points drawn per shape and step.
    pub points_per_shape: usize,
    pub lr: f64,
    pub lr_decay: f64,
    /// Epochs between decays; 0 disables decay.
    pub decay_every: usize,
    pub epochs: usize,
    /// Stop after this many epochs without a better validation loss; 0
    /// disables early stopping.
    pub patience: usize,
    pub seed: u64,
    /// Validation interval in epochs.
    pub eval_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 64,
            points_per_shape: 1000,
            lr: 5e-4,
            lr_decay: 0.2,
            decay_every: 200,
            epochs: 1000,
            patience: 100,
            seed: 0,
            eval_every: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.points_per_shape == 0 || self.eval_every == 0 {
            return Err(TrainError::Config("batch_size, points_per_shape and eval_every must be positive".into()));
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) || !(self.lr_decay > 0.0) {
            return Err(TrainError::Config("lr must be non-negative and lr_decay positive".into()));
        }
        Ok(())
    }

    /// Learning rate in effect during `epoch` (0-based).
    pub fn lr_at(&self, epoch: usize) -> f64 {
        match self.decay_every {
            0 => self.lr,
            n => self.lr * self.lr_decay.powi((epoch / n) as i32),
        }
    }
}

/// Mean binary cross-entropy of probabilities, clamped to `[1e-7, 1 - 1e-7]`.
pub fn bce_loss(probs: &[f64], labels: &[f64]) -> Result<f64> {
    if probs.len() != labels.len() || probs.is_empty() {
        return Err(TrainError::Config(format!("{} predictions for {} labels", probs.len(), labels.len())));
    }
    if labels.iter().any(|&y| y != 0.0 && y != 1.0) {
        return Err(TrainError::Labels);
    }
    let s: f64 = probs
        .iter()
        .zip(labels)
        .map(|(&p, &y)| {
            let p = p.clamp(1e-7, 1.0 - 1e-7);
            -(y * p.ln() + (1.0 - y) * (1.0 - p).ln())
        })
        .sum();
    Ok(s / probs.len() as f64)
}

/// Deterministic 90/10 split by hashed shape index. If either side would be
/// empty, both sides get every shape.
pub fn split_indices(count: usize) -> (Vec<usize>, Vec<usize>) {
    let (val, train): (Vec<usize>, Vec<usize>) = (0..count).partition(|&i| hash64(i as u64) % 10 == 0);
    if val.is_empty() || train.is_empty() {
        let all: Vec<usize> = (0..count).collect();
        return (all.clone(), all);
    }
    (train, val)
}

/// Training item with `j` queries drawn without replacement.
pub fn draw_sample(rec: &ShapeRecord, j: usize, rng: &mut RngStream) -> Sample {
    let t = rec.supervision.len();
    let idx = rng.choose_distinct(t, j.min(t));
    Sample {
        cloud: rec.cloud.clone(),
        queries: idx.iter().map(|&i| rec.supervision.points[i]).collect(),
        labels: idx.iter().map(|&i| rec.supervision.labels[i] as f64).collect(),
    }
}

/// One optimizer step on `batch`; returns the loss before the update.
/// BatchNorm uses and updates batch statistics.
pub fn train_step(model: &Model, params: &mut ParamStore<f32>, opt: &mut Adam<f32>, batch: &[Sample], lr: f64) -> Result<f64> {
    if batch.is_empty() {
        return Err(TrainError::Config("empty batch".into()));
    }
    let (loss, grads, stats) = {
        let mut ctx = Ctx::new(params, Mode::Train);
        let l = model.loss(&mut ctx, batch)?;
        let loss = ctx.tape.value(l).data()[0] as f64;
        let g = ctx.tape.backward(l).map_err(ModelError::from)?;
        (loss, ctx.param_grads(&g), ctx.take_stat_updates())
    };
    if !loss.is_finite() {
        return Err(TrainError::NonFinite { epoch: 0, step: 0 });
    }
    opt.step(params, &grads, lr).map_err(ModelError::from)?;
    params.apply_stat_updates(stats);
    Ok(loss)
}

/// Replaces BatchNorm running statistics by the average of the batch
/// statistics over `batches`, with the weights held fixed.
pub fn recalibrate_bn(model: &Model, params: &mut ParamStore<f32>, batches: &[Vec<Sample>]) -> Result<()> {
    for (k, batch) in batches.iter().enumerate() {
        let stats = {
            let mut ctx = Ctx::new(params, Mode::Train);
            ctx.stat_momentum = Some(1.0 / (k + 1) as f64);
            model.logits(&mut ctx, batch)?;
            ctx.take_stat_updates()
        };
        params.apply_stat_updates(stats);
    }
    Ok(())
}

/// Mean inference-mode loss over `samples`, in batches.
pub fn eval_loss(model: &Model, params: &ParamStore<f32>, samples: &[Sample], batch_size: usize) -> Result<f64> {
    let mut total = 0.0;
    let mut count = 0usize;
    for chunk in samples.chunks(batch_size.max(1)) {
        let mut ctx = Ctx::inference(params);
        let l = model.loss(&mut ctx, chunk)?;
        let n: usize = chunk.iter().map(|s| s.labels.len()).sum();
        total += ctx.tape.value(l).data()[0] as f64 * n as f64;
        count += n;
    }
    Ok(if count == 0 { f64::NAN } else { total / count as f64 })
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    /// `None` on epochs without validation.
    pub val_loss: Option<f64>,
    pub lr: f64,
}

impl EpochRecord {
    pub fn line(&self) -> String {
        let val = self.val_loss.map_or("nan".to_string(), |v| format!("{v:.6e}"));
        format!("{}\t{:.6e}\t{}\t{:.6e}", self.epoch, self.train_loss, val, self.lr)
    }
}

pub const LOG_HEADER: &str = "epoch\ttrain_loss\tval_loss\tlr";

pub struct FitResult {
    /// Parameters of the epoch with the best validation loss.
    pub best: ParamStore<f32>,
    pub best_epoch: Option<usize>,
    pub best_val: f64,
    pub log: Vec<EpochRecord>,
}

/// Where `fit` reports progress: the log file and the best checkpoint.
#[derive(Default)]
pub struct FitOutputs<'a> {
    pub log: Option<&'a mut dyn Write>,
    pub checkpoint: Option<(&'a Path, Vec<(String, String)>)>,
}

/// Epoch loop with step decay, best-validation selection and early stopping.
/// Training batches whose statistics replace the BatchNorm running
/// averages before each validation.
pub const BN_BATCHES: usize = 4;

pub fn fit(
    model: &Model,
    params: ParamStore<f32>,
    train: &[ShapeRecord],
    val: &[ShapeRecord],
    cfg: &TrainConfig,
    mut out: FitOutputs<'_>,
) -> Result<FitResult> {
    cfg.validate()?;
    if train.is_empty() || val.is_empty() {
        return Err(TrainError::Config("empty training or validation set".into()));
    }
    let root = RngStream::new(cfg.seed).split("train");
    let mut vrng = root.split("val");
    let val_samples: Vec<Sample> = val.iter().map(|r| draw_sample(r, cfg.points_per_shape, &mut vrng)).collect();
    let mut params = params;
    let mut opt = Adam::new(&params);
    let mut best = params.clone();
    let (mut best_epoch, mut best_val) = (None, f64::INFINITY);
    let mut log = Vec::new();
    if let Some(w) = out.log.as_deref_mut() {
        writeln!(w, "{LOG_HEADER}")?;
    }
    for epoch in 0..cfg.epochs {
        let lr = cfg.lr_at(epoch);
        let mut erng = root.split_index(epoch as u64);
        let mut order: Vec<usize> = (0..train.len()).collect();
        erng.shuffle(&mut order);
        let mut total = 0.0;
        for (step, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let batch: Vec<Sample> = chunk.iter().map(|&i| draw_sample(&train[i], cfg.points_per_shape, &mut erng)).collect();
            total += train_step(model, &mut params, &mut opt, &batch, lr).map_err(|e| match e {
                TrainError::NonFinite { .. } => TrainError::NonFinite { epoch, step },
                e => e,
            })?;
        }
        let steps = train.len().div_ceil(cfg.batch_size);
        let validate = (epoch + 1) % cfg.eval_every == 0 || epoch + 1 == cfg.epochs;
        let val_loss = if validate {
            let mut brng = root.split("bn").split_index(epoch as u64);
            let batches: Vec<Vec<Sample>> = (0..BN_BATCHES)
                .map(|_| {
                    let idx = brng.choose_distinct(train.len(), cfg.batch_size.min(train.len()));
                    idx.iter().map(|&i| draw_sample(&train[i], cfg.points_per_shape, &mut brng)).collect()
                })
                .collect();
            recalibrate_bn(model, &mut params, &batches)?;
            Some(eval_loss(model, &params, &val_samples, cfg.batch_size)?)
        } else {
            None
        };
        let rec = EpochRecord {
            epoch: epoch + 1,
            train_loss: total / steps as f64,
            val_loss,
            lr,
        };
        if let Some(w) = out.log.as_deref_mut() {
            writeln!(w, "{}", rec.line())?;
            w.flush()?;
        }
        log.push(rec);
        if let Some(v) = val_loss {
            if v < best_val {
                best_val = v;
                best_epoch = Some(epoch + 1);
                best = params.clone();
                if let Some((path, meta)) = &out.checkpoint {
                    let mut meta = meta.clone();
                    meta.push(("epoch".into(), (epoch + 1).to_string()));
                    Checkpoint::from_store(&best, meta).save(path)?;
                }
            }
        }
        if cfg.patience > 0 {
            if let Some(b) = best_epoch {
                if epoch + 1 - b >= cfg.patience {
                    break;
                }
            }
        }
    }
    Ok(FitResult {
        best,
        best_epoch,
        best_val,
        log,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::decoder::DecoderConfig;
    use crate::encoder::{EncoderConfig, SetAbsMode};
    use crate::model::ModelConfig;
    use crate::synthdata::{self, DatasetSpec, Primitive, Regime, SdfShape};

    fn small() -> ModelConfig {
        ModelConfig {
            encoder: EncoderConfig {
                d: 16,
                m: 8,
                cardinalities: vec![16, 8],
                l2: 1,
                k_enc: 6,
                set_abs: SetAbsMode::Attentive,
            },
            decoder: DecoderConfig {
                k_dec: 4,
                d_dec: 16,
                head_blocks: 2,
                head_width: 32,
                ..DecoderConfig::default()
            },
        }
    }

    fn sphere_record(seed: u64) -> ShapeRecord {
        let shape = SdfShape::new(vec![Primitive::Sphere { center: [0.0; 3], radius: 0.3 }]).unwrap();
        let mut rng = RngStream::new(seed);
        ShapeRecord {
            cloud: synthdata::sample_surface(&shape, 64, 0.0, &mut rng).unwrap(),
            supervision: synthdata::sample_supervision(&shape, 2000, Regime::NearSurface, &mut rng).unwrap(),
            shape,
        }
    }

    #[test]
    fn bce_closed_forms() {
        let y = [0.0, 1.0, 1.0, 0.0];
        assert!((bce_loss(&[0.5; 4], &y).unwrap() - std::f64::consts::LN_2).abs() < 1e-12);
        let perfect = bce_loss(&y, &y).unwrap();
        assert!(perfect <= 2e-7 * (1e-7f64).ln().abs());
        assert!(bce_loss(&[0.5], &[2.0]).is_err());
        assert!(bce_loss(&[0.5], &[]).is_err());
    }

    #[test]
    fn bce_matches_elementwise_oracle() {
        let mut rng = RngStream::new(3);
        let p: Vec<f64> = (0..50).map(|_| rng.uniform_range(0.01, 0.99)).collect();
        let y: Vec<f64> = (0..50).map(|_| rng.below(2) as f64).collect();
        let mut oracle = 0.0;
        for i in 0..50 {
            oracle += if y[i] == 1.0 { -p[i].ln() } else { -(1.0 - p[i]).ln() };
        }
        assert!((bce_loss(&p, &y).unwrap() - oracle / 50.0).abs() < 1e-7);
    }

    #[test]
    fn logit_loss_agrees_with_probability_loss() {
        let (m, p) = Model::new::<f64>(&small(), 1).unwrap();
        let rec = sphere_record(2);
        let s = draw_sample(&rec, 50, &mut RngStream::new(4));
        let mut ctx = Ctx::inference(&p);
        let l = m.loss(&mut ctx, std::slice::from_ref(&s)).unwrap();
        let direct = ctx.tape.value(l).data()[0];
        let enc = m.encode(&p, &s.cloud).unwrap();
        let probs = m.decode(&p, &enc, &s.queries).unwrap();
        assert!((bce_loss(&probs, &s.labels).unwrap() - direct).abs() < 1e-9);
    }

    #[test]
    fn lr_schedule() {
        let c = TrainConfig::default();
        assert_eq!(c.lr_at(0), 5e-4);
        assert_eq!(c.lr_at(199), 5e-4);
        assert!((c.lr_at(200) - 1e-4).abs() < 1e-18);
        assert!((c.lr_at(450) - 2e-5).abs() < 1e-18);
        assert_eq!(TrainConfig { decay_every: 0, ..c }.lr_at(10_000), 5e-4);
    }

    #[test]
    fn split_is_ninety_ten() {
        let (t, v) = split_indices(1000);
        assert_eq!(t.len() + v.len(), 1000);
        assert!((70..=130).contains(&v.len()), "{}", v.len());
        assert!(t.iter().all(|i| !v.contains(i)));
        assert_eq!(split_indices(1), (vec![0], vec![0]));
    }

    #[test]
    fn zero_lr_keeps_parameters() {
        let (m, mut p) = Model::new::<f32>(&small(), 5).unwrap();
        let before = p.clone();
        let mut opt = Adam::new(&p);
        let batch = [draw_sample(&sphere_record(6), 100, &mut RngStream::new(7))];
        let loss = train_step(&m, &mut p, &mut opt, &batch, 0.0).unwrap();
        assert!(loss.is_finite());
        for (a, b) in p.entries().iter().zip(before.entries()).filter(|(a, _)| a.trainable) {
            assert_eq!(a.tensor, b.tensor);
        }
    }

    #[test]
    fn single_shape_loss_decreases() {
        let (m, mut p) = Model::new::<f32>(&small(), 8).unwrap();
        let rec = sphere_record(9);
        let mut opt = Adam::new(&p);
        let batch = [draw_sample(&rec, 400, &mut RngStream::new(10))];
        let losses: Vec<f64> = (0..50).map(|_| train_step(&m, &mut p, &mut opt, &batch, 1e-3).unwrap()).collect();
        let down = losses.windows(2).filter(|w| w[1] < w[0]).count();
        assert!(down as f64 >= 0.9 * 49.0, "{down} of 49: {losses:?}");
        assert!(losses[49] < losses[0], "{losses:?}");
    }

    #[test]
    fn zero_epochs_returns_initial_model() {
        let (m, p) = Model::new::<f32>(&small(), 11).unwrap();
        let recs = vec![sphere_record(12)];
        let r = fit(&m, p.clone(), &recs, &recs, &TrainConfig { epochs: 0, ..Default::default() }, FitOutputs::default()).unwrap();
        assert!(r.log.is_empty());
        assert_eq!(r.best.entries().len(), p.entries().len());
        for (a, b) in r.best.entries().iter().zip(p.entries()) {
            assert_eq!(a.tensor, b.tensor);
        }
    }

    #[test]
    fn fit_is_reproducible_and_selects_best() {
        let spec = DatasetSpec { count: 6, supervision: 500, points: 64, ..DatasetSpec::default() };
        let recs = synthdata::make_dataset(&spec).unwrap();
        let cfg = TrainConfig { batch_size: 2, points_per_shape: 100, epochs: 4, lr: 1e-3, seed: 3, ..Default::default() };
        let dir = tempfile::tempdir().unwrap();
        let ck = dir.path().join("best.ckpt");
        let run = |ck: Option<&Path>| {
            let (m, p) = Model::new::<f32>(&small(), 13).unwrap();
            let mut log = Vec::new();
            let out = FitOutputs {
                log: Some(&mut log),
                checkpoint: ck.map(|c| (c, vec![("seed".to_string(), "13".to_string())])),
            };
            let r = fit(&m, p, &recs[..4], &recs[4..], &cfg, out).unwrap();
            (r, log)
        };
        let (a, la) = run(Some(&ck));
        let (b, lb) = run(None);
        assert_eq!(la, lb);
        assert_eq!(a.log, b.log);
        assert_eq!(String::from_utf8(la).unwrap().lines().count(), 5);
        for r in &a.log {
            assert!(a.best_val <= r.val_loss.unwrap());
        }
        let (_, mut back) = Model::new::<f32>(&small(), 99).unwrap();
        let loaded = Checkpoint::load(&ck).unwrap();
        assert_eq!(loaded.meta("epoch"), Some(a.best_epoch.unwrap().to_string().as_str()));
        loaded.load_into(&mut back).unwrap();
        for (x, y) in back.entries().iter().zip(a.best.entries()) {
            assert_eq!(x.tensor, y.tensor);
        }
    }
}
