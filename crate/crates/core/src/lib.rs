//! Image-conditioned part-based 3D generation on synthetic composite shapes.
//!
//! Objects are represented as a fixed number of latent slots, one per part,
//! padded with a frozen null embedding. A gating head predicts which slots an
//! image needs, a rectified-flow transformer generates the active slots, and a
//! small bank of shared prototypes regularises and guides the slot latents.

pub mod cli;
pub mod codec;
pub mod config;
pub mod dataset;
pub mod error;
pub mod eval;
pub mod flow;
pub mod gate;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod pipeline;
pub mod proto;
pub mod slots;
pub mod synth;
pub mod train;
pub mod view;

pub use config::Config;
pub use error::{Error, Result};
pub use model::{Checkpoint, Model, Stage};
