//! Data curation for name-only continual learning.
//!
//! A concept name goes in; the pipeline expands it into a tree of diverse
//! prompts ([`hirpg`]), renders samples through a pool of generators
//! ([`backends`]), scores every sample by relative Mahalanobis distance
//! ([`rmd`]), picks a complexity-aware coreset ([`selection`]) and trains a
//! learner on it with experience replay ([`stream`]). [`metrics`] holds the
//! evaluation suite.

pub mod backends;
mod error;
pub mod hirpg;
pub mod metrics;
pub mod rmd;
pub mod seeding;
pub mod selection;
pub mod stream;

pub use error::{BackendCategory, BackendError, Error, Result};
