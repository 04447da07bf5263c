//! Multi-modal visual tracking by prompting a frozen RGB tracker with a
//! mixture of modality-specialised and shared low-rank experts.
//!
//! The numeric core is generic over [`Scalar`] (`f32` or `f64`); the aliases
//! at the bottom fix the precision used for training (`f32`) and gradient
//! checks (`f64`).

pub mod autodiff;
pub mod backbone;
pub mod checkpoint;
pub mod config;
pub mod dataset_io;
pub mod error;
pub mod eval_metrics;
pub mod expert_bank;
pub mod experiments;
pub mod geometry;
pub mod gradcheck;
pub mod modality;
pub mod model;
pub mod moe_router;
pub mod nn;
pub mod objectives;
pub mod optim;
pub mod params;
pub mod prompt_fusion;
pub mod scalar;
pub mod synthetic_modalities;
pub mod tokenizer;
pub mod trainer;

pub use error::{Error, Result};
pub use geometry::{iou, BoxN, BoxPx};
pub use modality::Modality;
pub use scalar::Scalar;

pub type Tape32<'p> = autodiff::Tape<'p, f32>;
pub type Tape64<'p> = autodiff::Tape<'p, f64>;
pub type ParamStore32 = params::ParamStore<f32>;
pub type ParamStore64 = params::ParamStore<f64>;
pub type Tracker32 = model::Tracker<f32>;
pub type Tracker64 = model::Tracker<f64>;
pub type Frame32 = tokenizer::Frame<f32>;
