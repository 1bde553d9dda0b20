//! Worldwide image geo-localization as hierarchical classification.
//!
//! The toolkit partitions the sphere into nested geocell hierarchies, trains
//! a query-based decoder that attends image tokens against learned
//! hierarchy-and-scene queries, and localizes by composing class
//! probabilities down the hierarchy chain. Companion tooling covers
//! area-weighted location sampling, coverage-bias metrics, and threshold
//! accuracy evaluation.
//!
//! Start with the `examples/` directory: each file is a runnable tour of one
//! capability (partitioning, training, prediction, attention export,
//! sampling, bias analysis, gradient checking).

pub mod cli;
pub mod datatools;
pub mod error;
pub mod geocell;
pub mod geodecoder;
pub mod inference;
pub mod numerics;

pub use error::{Error, Result};
