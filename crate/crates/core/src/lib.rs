//! Sequential diagnosis prediction over patient journeys.
//!
//! The pipeline, bottom to top:
//!
//! * [`graph`]: a small reverse-mode differentiation tape over `f64` tensors,
//!   with [`optim::Adadelta`] and a finite-difference [`gradcheck`].
//! * [`ontology`] / [`embedding`]: a medical ontology DAG and the
//!   attention-weighted ancestor embedding of each leaf code.
//! * [`encoder`]: dual multi-head self-attention over a visit's code and
//!   ontology embeddings, information integration and attention pooling.
//! * [`ode`]: fixed-step neural ODEs for length-of-stay and inter-visit
//!   interval states, fusion, and the positional substitute.
//! * [`journey`]: causal journey transformer, prediction head, loss.
//! * [`metrics`]: Accuracy@k.
//! * [`data`]: synthetic corpora with a planted, time-dependent signal,
//!   file formats, grouping and splits, and the Bayes-oracle ceiling.
//! * [`model`] / [`trainer`]: the assembled model, training, evaluation and
//!   ablations.

pub mod checkpoint;
pub mod config;
pub mod data;
pub mod embedding;
pub mod encoder;
pub mod error;
pub mod gradcheck;
pub mod graph;
pub mod journey;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod ode;
pub mod ontology;
pub mod optim;
pub mod params;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use graph::{Graph, Var};
pub use params::{ParamId, ParamStore};
pub use tensor::Tensor;
