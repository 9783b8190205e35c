//! Pseudo-labeling for embedding classifiers trained with a cosine-margin
//! head. Unlabeled samples whose identity is already known are filtered by
//! a Weibull mixture on max-logits; the rest are clustered with a graph
//! network over k-NN proposals; a noise model turns clustering uncertainty
//! into per-sample loss weights for retraining.

// NaN-rejecting checks are written as `!(x > 0.0)` on purpose; index loops
// walk several parallel arrays.
#![allow(
    clippy::neg_cmp_op_on_partial_ord,
    clippy::needless_range_loop,
    clippy::type_complexity
)]

pub mod cluster;
pub mod config;
pub mod data;
pub mod eval;
pub mod evt;
pub mod knn;
pub mod noise;
pub mod pipeline;
pub mod rng;
pub mod synth;
pub mod train;
