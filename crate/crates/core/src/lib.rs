//! Occupancy-field reconstruction from sparse point clouds.
//!
//! A vector-attention encoder turns a cloud into anchor points with local
//! latents plus a global latent; an attentive decoder maps query points to
//! occupancy probabilities. Around the model sit a small reverse-mode tensor
//! engine, synthetic primitive-union datasets with analytic occupancy, a
//! training loop, multiresolution isosurface extraction with marching cubes,
//! and mesh metrics.
//!
//! ```no_run
//! use airnet::extraction::{reconstruct, ExtractConfig};
//! use airnet::pipeline::load_checkpoint;
//! use airnet::synthdata::{make_record, DatasetSpec};
//!
//! let (model, params, _) = load_checkpoint("run/best.ckpt".as_ref())?;
//! let rec = make_record(&DatasetSpec::default(), 0)?;
//! let mesh = reconstruct(&model, &params, &rec.cloud, &ExtractConfig::default())?;
//! mesh.save_obj("shape.obj".as_ref())?;
//! # Ok::<(), Box<dyn std::error::Error>>(())
//! ```

pub mod attention;
pub mod decoder;
pub mod encoder;
pub mod extraction;
pub mod geometry;
pub mod gradcheck;
pub mod metrics;
pub mod model;
pub mod pipeline;
pub mod rng;
pub mod synthdata;
pub mod tensor;
pub mod training;

#[cfg(test)]
pub(crate) mod testutil;
