//! Retrieval-and-attunement engine for zero-shot image classifiers.
//!
//! A captioned embedding corpus is indexed by caption tokens. Exact phrase
//! search for each class name yields per-class clusters (the priming pool),
//! which are filtered for zero-shot consistency, optionally narrowed to the
//! neighbors of the unlabeled test set, and averaged into a nearest-class-mean
//! head that is blended with the text head.

pub mod attune;
pub mod corpus_io;
pub mod error;
pub mod eval;
pub mod head;
pub mod linalg;
pub mod pipeline;
pub mod pool;
pub mod synthbench;
pub mod text_index;
pub mod transduct;

pub use error::{Error, Result};
