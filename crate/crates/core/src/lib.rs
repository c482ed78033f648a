//! Disentangled latent space over measured MERL BRDFs.
//!
//! The crate covers the whole offline pipeline: MERL table I/O ([`merl_io`]),
//! normalization and slice reduction ([`preprocess`]), the convolutional beta-VAE
//! ([`vae_model`]) and its training loop ([`training`]), reconstruction metrics
//! ([`metrics`]), latent-space editing tools ([`latent_tools`]) and a small sphere
//! renderer for previews ([`render_preview`]).

#![allow(clippy::needless_range_loop, clippy::neg_cmp_op_on_partial_ord)]

pub mod checkpoint;
pub mod error;
pub mod latent_tools;
pub mod merl_io;
pub mod metrics;
pub mod nn;
pub mod preprocess;
pub mod render_preview;
pub mod synthetic;
pub mod training;
pub mod vae_model;

pub use error::{Error, Result};
