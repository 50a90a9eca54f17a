//! Command-line pipeline, synthetic scenes and the annotation service.

// `!(x > 0.0)` style checks are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod config;
pub mod manifest;
pub mod pipeline;
pub mod service;
pub mod synthetic;
