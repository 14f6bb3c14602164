//! Auditing virtual-screening models with synthetic binding logics.
//!
//! The pipeline: parse a SMILES library ([`molgraph`]), match SMARTS fragments
//! ([`smarts`]), label molecules with an and/or/not binding logic ([`logic`]),
//! build negation-balanced datasets ([`dataset`]), train a small
//! message-passing network ([`nnet`]), attribute its predictions with
//! Integrated Gradients ([`attribution`]), score the attributions against the
//! known logic ([`metrics`]) and search for logic-preserving edits that flip
//! the prediction ([`attack`]).
//!
//! Numeric code is generic over [`Scalar`]; the `*F64` aliases below are the
//! types the pipeline and CLI use.

pub mod attack;
pub mod attribution;
pub mod dataset;
pub mod logic;
pub mod metrics;
pub mod molgraph;
pub mod nnet;
pub mod scalar;
pub mod smarts;
pub mod synth;

pub use scalar::Scalar;

pub type FeatureTensorF64 = dataset::FeatureTensor<f64>;
pub type FeatureTensorF32 = dataset::FeatureTensor<f32>;
pub type ModelParamsF64 = nnet::ModelParams<f64>;
pub type ModelParamsF32 = nnet::ModelParams<f32>;
pub type AttributionResultF64 = attribution::AttributionResult<f64>;
pub type AttributionResultF32 = attribution::AttributionResult<f32>;

/// Shipped fragment library (`NAME<TAB>SMARTS`).
pub const FRAGMENTS_TSV: &str = include_str!("../data/fragments.tsv");
/// Shipped binding logics (`ID<TAB>LOGIC`).
pub const LOGICS_TSV: &str = include_str!("../data/logics.tsv");
