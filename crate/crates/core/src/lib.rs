// `!(x > 0.0)` is used on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod analysis;
pub mod cli;
pub mod config;
pub mod drift;
pub mod kolmogorov;
pub mod noise;
pub mod scheme;
pub mod spectral;
