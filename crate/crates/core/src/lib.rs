//! Multi-faceted hierarchical quantization (MHQ) of item embeddings and an
//! asymmetric generative recommender: continuous embeddings in through a
//! gated mixture of experts, structured semantic codes out through parallel
//! classification heads.

pub mod data;
pub mod error;
pub mod eval;
pub mod format;
pub mod mhq;
pub mod msp;
pub mod nn;
pub mod recmodel;
pub mod numerics;

#[cfg(any(test, feature = "oracle"))]
pub mod oracle;

pub use error::{Error, Result};
