//! Missing-event-aware temporal graph model.
//!
//! A temporal graph is a time-ordered stream of undirected interaction events.
//! The model learns node embeddings with time-aware message passing and GRU
//! evolution, predicts the next interacting pair and its time with a
//! log-normal mixture point process, and couples the observed stream with
//! latent missing events drawn from a variational posterior and trained
//! through an evidence lower bound.

// negated float comparisons are used deliberately so NaN fails validation
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod autodiff;
pub mod config;
pub mod embeddings;
pub mod evaluator;
pub mod heads;
pub mod missing;
pub mod model;
pub mod parallel;
pub mod pipeline;
pub mod stream;
pub mod tpp;
pub mod trainer;
