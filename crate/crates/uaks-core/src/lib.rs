//! End-to-end keyword search with acoustic-unit-discovery pretraining.
//!
//! The crate is organized around the stages of the pipeline:
//!
//! - [`corpus`]: feature/alignment/query ingestion, frame labels and a
//!   deterministic synthetic corpus for tests and recipes.
//! - [`aud`]: phone-loop HMM acoustic unit discovery — subspace parameter
//!   construction, EM training and Viterbi labeling into unit transcripts.
//! - [`pseudo`]: pseudo-word (unit n-gram) extraction and the pretraining
//!   query/occurrence index.
//! - [`model`]: the dual-encoder network (GRU query encoder, BLSTM document
//!   encoder, inner-product frame scorer) with exact analytic gradients.
//! - [`train`]: the masked weighted BCE objective, batch sampling, learning
//!   rate schedules and the pretrain/finetune loops.
//! - [`search`]: posterior post-processing into scored hypotheses (island
//!   detection, keyword-specific threshold normalization).
//! - [`eval`]: NIST-style TWV/MTWV/ATWV scoring, bootstrap confidence
//!   intervals and normalized mutual information.

pub mod aud;
pub mod corpus;
pub mod error;
pub mod eval;
pub mod model;
pub mod pseudo;
pub mod search;
pub mod train;

pub use error::{Error, Result};
