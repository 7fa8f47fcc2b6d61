//! facet-core: a desk-scale lab for two-stage concept personalization in a
//! small conditional diffusion engine.
//!
//! The crate is organized bottom-up:
//!
//! * [`tensor`], [`tape`], [`gradcheck`] — dense float64 tensors and
//!   reverse-mode autodiff on a Wengert tape, verified by finite differences;
//! * [`schedule`], [`sampler`] — the forward-noising schedule, posterior
//!   quantities, and deterministic DDIM sampling with classifier-free guidance;
//! * [`checkpoint`] — the shared manifest + little-endian blob artifact format;
//! * [`seeds`], [`optim`] — deterministic seed splitting and the Adam-style
//!   optimizer over an explicit parameter store.
//!
//! Higher layers (vocabulary, encoder, denoiser, training stages, synthetic
//! data, and evaluation probes) build strictly on these.

pub mod adapter;
pub mod checkpoint;
pub mod data;
pub mod denoiser;
pub mod encoder;
pub mod engine;
pub mod error;
pub mod finetune;
pub mod gradcheck;
pub mod metrics;
pub mod nn;
pub mod optim;
pub mod pretrain;
pub mod sampler;
pub mod schedule;
pub mod seeds;
pub mod sweep;
pub mod tape;
pub mod tensor;
pub mod tokenopt;
pub mod tokens;

pub use error::{Error, Result};
pub use tape::{Binding, ParamId, Tape, ValueRef};
pub use tensor::Tensor;
