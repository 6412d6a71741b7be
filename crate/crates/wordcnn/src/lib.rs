//! Word-level CNN sentiment classification for review corpora, built from scratch.
//!
//! The crate covers the full pipeline: streaming a JSON-lines review dump,
//! labeling star ratings with a binary polarity, tokenizing and encoding text
//! against a frequency-capped vocabulary, loading pretrained word vectors in
//! the common text and binary formats, and training two 1-D convolutional
//! architectures with hand-written forward/backward passes.
//!
//! Everything downstream of a seed is deterministic: shuffles, splits, folds,
//! parameter initialization, and dropout all draw from seeded ChaCha8 streams,
//! so identical configs produce bitwise-identical checkpoints.

pub mod cli;
pub mod corpus;
pub mod embed;
pub mod error;
pub mod model;
pub mod nn;
pub mod optim;
pub mod text;
pub mod train;

pub use error::{Error, Result};
