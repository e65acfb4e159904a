//! Food commodity price forecasting and early-warning toolkit: multi-source
//! CSV ingestion, invertible cleaning, flattened-window encoding, two small
//! encoder-only transformers trained with reverse-mode differentiation, a
//! horizon-sweep evaluation harness, and a retrieval-backed chat layer.

pub mod chat;
pub mod cli;
pub mod ingest;
pub mod models;
pub mod numerics;
pub mod preprocess;
pub mod training;
