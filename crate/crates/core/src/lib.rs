//! Ordinal LLM-judge audit toolkit: dataset provenance, prediction grids,
//! metrics with uncertainty, identifiability checks and rank aggregation.

pub mod agreement;
pub mod audit;
pub mod corpus;
pub mod grid;
pub mod identify;
pub mod metrics;
pub mod rank;
pub mod resample;
pub mod stats;
pub mod synth;
