//! Lane-keeping-assist failure alerting toolkit.
//!
//! Telemetry mining ([`canlog`], [`windowing`]), dataset assembly
//! ([`dataset`]), a frozen multimodal encoder ([`encoder`]), a LoRA-adapted
//! autoregressive decoder ([`decoder`]), adapter training ([`trainer`]) and
//! the evaluation stack ([`metrics`]). [`checkpoint`] bundles a trained
//! model and stores it on disk.

// `!(x > 0.0)` style checks are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod canlog;
pub mod checkpoint;
pub mod dataset;
pub mod decoder;
pub mod encoder;
pub mod media;
pub mod metrics;
pub mod text;
pub mod trainer;
pub mod windowing;
