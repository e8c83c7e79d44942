//! Intent-aware sentence encoders and prototypical few-shot intent classification.
//!
//! The pipeline runs in five steps:
//!
//! 1. [`corpus`] loads and normalises labelled utterances and class splits.
//! 2. [`irl`] tags intent roles.
//! 3. [`pseudo`] turns the tagged spans into pseudo intent names.
//! 4. [`contrastive`] pre-trains an encoder against gold intents, same-intent utterances and pseudo intents.
//! 5. [`episodes`] scores the result with [`proto`]typical N-way K-shot classification.

pub mod contrastive;
pub mod corpus;
pub mod encoder;
pub mod episodes;
pub mod error;
pub mod fingerprint;
pub mod irl;
pub mod optim;
pub mod proto;
pub mod pseudo;
pub mod rng;
pub mod text;

pub use error::{PieError, Result};
