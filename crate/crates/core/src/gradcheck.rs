//! Finite-difference verification of tape gradients.
//!
//! Differences are taken in `f64`. Piecewise-linear ops (ReLU, max pooling)
//! make the objective non-smooth on measure-zero sets, and a freshly
//! initialized network sits on such a set more often than one would think:
//! zero biases put every self-pair positional encoding exactly on a ReLU
//! switch. Each evaluation therefore also reports the tape's kink signature,
//! and the stencil is restricted to the side whose switch pattern matches
//! the base point.

use crate::decoder::DecoderConfig;
use crate::encoder::{EncoderConfig, ModelError, Result, SetAbsMode};
use crate::geometry::PointCloud;
use crate::model::{Model, ModelConfig, Sample};
use crate::rng::RngStream;
use crate::tensor::{Ctx, Fault, Mode, ParamStore};

/// Relative error with a denominator floor, so that two near-zero values
/// compare as equal.
pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-6)
}

/// Derivative estimate of one coordinate. `f` returns the objective and the
/// kink signature of its evaluation.
pub fn partial(mut f: impl FnMut(f64) -> (f64, u64), x0: f64, h: f64) -> f64 {
    let (f0, s0) = f(x0);
    let mut h = h;
    while h >= 1e-8 {
        let (fp, sp) = f(x0 + h);
        let (fm, sm) = f(x0 - h);
        if sp == s0 && sm == s0 {
            return (fp - fm) / (2.0 * h);
        }
        if sp == s0 {
            let (fpp, spp) = f(x0 + 2.0 * h);
            if spp == s0 {
                return (-3.0 * f0 + 4.0 * fp - fpp) / (2.0 * h);
            }
        }
        if sm == s0 {
            let (fmm, smm) = f(x0 - 2.0 * h);
            if smm == s0 {
                return (3.0 * f0 - 4.0 * fm + fmm) / (2.0 * h);
            }
        }
        h *= 0.1;
    }
    let (fp, _) = f(x0 + h);
    let (fm, _) = f(x0 - h);
    (fp - fm) / (2.0 * h)
}

/// Adds uniform noise in `±scale` to every trainable parameter.
///
/// With zero biases the self-pair positional encoding is exactly zero and
/// every score ReLU sits on its switch, where the objective has no gradient
/// at all. A small jitter moves the check to a generic nearby point.
pub fn jitter(params: &mut ParamStore<f64>, scale: f64, seed: u64) {
    let mut rng = RngStream::new(seed).split("jitter");
    for e in params.entries_mut().iter_mut().filter(|e| e.trainable) {
        for v in e.tensor.data_mut() {
            *v += scale * (2.0 * rng.next_f64() - 1.0);
        }
    }
}

/// The smallest configuration that still exercises every module: 24 input
/// points, 4 anchors of width 8, one downsampling and one full-attention
/// layer, 3 decoder neighbors and a head of width 16.
pub fn tiny_config() -> ModelConfig {
    ModelConfig {
        encoder: EncoderConfig {
            d: 8,
            m: 4,
            cardinalities: vec![4],
            l2: 1,
            k_enc: 4,
            set_abs: SetAbsMode::Attentive,
        },
        decoder: DecoderConfig {
            k_dec: 3,
            d_dec: 8,
            head_width: 16,
            ..DecoderConfig::default()
        },
    }
}

/// Tiny model at a jittered initialization with a batch of two random
/// clouds of 24 points and 8 labelled queries each.
pub fn tiny_problem(seed: u64) -> Result<(Model, ParamStore<f64>, Vec<Sample>)> {
    let (m, mut p) = Model::new::<f64>(&tiny_config(), seed)?;
    jitter(&mut p, 1e-3, seed);
    let mut r = RngStream::new(seed).split("batch");
    let mut pts = |n: usize| (0..n).map(|_| [r.next_f64() - 0.5, r.next_f64() - 0.5, r.next_f64() - 0.5]).collect::<Vec<_>>();
    let mut batch = Vec::new();
    for _ in 0..2 {
        batch.push(Sample {
            cloud: PointCloud::new(pts(24))?,
            queries: pts(8),
            labels: (0..8).map(|i| (i % 2) as f64).collect(),
        });
    }
    Ok((m, p, batch))
}

/// Worst relative error within one parameter tensor.
#[derive(Clone, Debug)]
pub struct GroupReport {
    pub name: String,
    pub size: usize,
    pub max_rel_err: f64,
}

#[derive(Clone, Debug)]
pub struct GradcheckReport {
    pub groups: Vec<GroupReport>,
    pub tolerance: f64,
}

impl GradcheckReport {
    pub fn max_rel_err(&self) -> f64 {
        self.groups.iter().map(|g| g.max_rel_err).fold(0.0, f64::max)
    }

    pub fn passed(&self) -> bool {
        !self.groups.is_empty() && self.groups.iter().all(|g| g.max_rel_err <= self.tolerance)
    }
}

/// Loss and kink signature of the full training objective on `batch`.
fn objective(
    model: &Model,
    params: &ParamStore<f64>,
    batch: &[Sample],
    fault: Option<Fault>,
) -> Result<(f64, u64)> {
    let mut ctx = Ctx::new(params, Mode::Train);
    ctx.tape.inject_fault(fault);
    let loss = model.loss(&mut ctx, batch)?;
    Ok((ctx.tape.value(loss).data()[0], ctx.tape.kink_signature()))
}

/// Compares every analytic parameter gradient of the training loss with
/// finite differences.
pub fn check_model(
    model: &Model,
    params: &ParamStore<f64>,
    batch: &[Sample],
    h: f64,
    tolerance: f64,
    fault: Option<Fault>,
) -> Result<GradcheckReport> {
    if params.num_trainable() == 0 {
        return Err(ModelError::Config("model has no trainable parameters".into()));
    }
    let mut ctx = Ctx::new(params, Mode::Train);
    ctx.tape.inject_fault(fault);
    let loss = model.loss(&mut ctx, batch)?;
    let grads = ctx.tape.backward(loss)?;
    let analytic = ctx.param_grads(&grads);
    let mut groups = Vec::new();
    let mut work = params.clone();
    for id in params.ids() {
        let entry = &params.entries()[id.index()];
        if !entry.trainable {
            continue;
        }
        let an = analytic[id.index()]
            .as_ref()
            .map(|t| t.to_f64_vec())
            .unwrap_or_else(|| vec![0.0; entry.tensor.len()]);
        let mut worst = 0.0f64;
        for i in 0..entry.tensor.len() {
            let x0 = entry.tensor.data()[i];
            let mut failure = None;
            let num = partial(
                |x| {
                    work.get_mut(id).data_mut()[i] = x;
                    match objective(model, &work, batch, fault) {
                        Ok(v) => v,
                        Err(e) => {
                            failure = Some(e);
                            (f64::NAN, 0)
                        }
                    }
                },
                x0,
                h,
            );
            work.get_mut(id).data_mut()[i] = x0;
            if let Some(e) = failure {
                return Err(e);
            }
            worst = worst.max(rel_err(an[i], num));
        }
        groups.push(GroupReport {
            name: entry.name.clone(),
            size: entry.tensor.len(),
            max_rel_err: worst,
        });
    }
    Ok(GradcheckReport { groups, tolerance })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tiny_model_passes_and_mutant_fails() {
        let (m, p, batch) = tiny_problem(11).unwrap();
        let t = std::time::Instant::now();
        let rep = check_model(&m, &p, &batch, 1e-5, 1e-4, None).unwrap();
        assert!(rep.passed(), "{:?}", rep.groups);
        assert!(t.elapsed().as_secs() < 120);
        let bad = check_model(&m, &p, &batch, 1e-5, 1e-4, Some(Fault::ReluBackwardLeak)).unwrap();
        assert!(!bad.passed());
    }

    #[test]
    fn empty_model_is_an_error() {
        let (m, mut p, batch) = tiny_problem(1).unwrap();
        for e in p.entries_mut() {
            e.trainable = false;
        }
        assert!(check_model(&m, &p, &batch, 1e-5, 1e-4, None).is_err());
    }

    fn sig(x: f64) -> u64 {
        (x > 0.0) as u64
    }

    #[test]
    fn smooth_function_uses_central_stencil() {
        let d = partial(|x| (x.sin(), 0), 0.3, 1e-5);
        assert!((d - 0.3f64.cos()).abs() < 1e-9);
    }

    #[test]
    fn kink_at_base_point_takes_matching_side() {
        // relu(x) + x^2 at 0: the switch is off at the base point, so the
        // left derivative 0 applies.
        let f = |x: f64| (x.max(0.0) + x * x, sig(x));
        assert!(partial(f, 0.0, 1e-5).abs() < 1e-9);
        // Just right of the kink, the step crosses it and is shrunk or
        // one-sided on the right.
        let d = partial(f, 3e-6, 1e-5);
        assert!((d - (1.0 + 6e-6)).abs() < 1e-8, "{d}");
    }

    #[test]
    fn relative_error_floor() {
        assert_eq!(rel_err(0.0, 0.0), 0.0);
        assert!(rel_err(1e-9, 0.0) < 1e-2);
        assert!((rel_err(1.0, 1.1) - 0.1 / 1.1).abs() < 1e-12);
    }
}
