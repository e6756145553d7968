//! Sequential-recommendation dataset regeneration.
//!
//! The pipeline mines span-constrained item-transition patterns from the
//! original interaction sequences, pre-trains a diversity-promoted
//! encoder-decoder to map sequences to patterns, regenerates a training
//! corpus with it, and finally reweights that corpus for a specific target
//! recommender via bi-level optimisation with implicit hypergradients.

pub mod bilevel;
pub mod checkpoint;
pub mod corpus;
pub mod error;
pub mod evalkit;
pub mod miner;
pub mod nn;
pub mod optim;
pub mod personalizer;
pub mod pipeline;
pub mod regenerator;
pub mod seeds;
pub mod target;

pub use error::{Error, Result};
