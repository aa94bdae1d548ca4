//! Multi-task training engine with on-the-fly branch merging.
//!
//! The pipeline: a multi-headed network trains on several tasks at once while
//! a tap captures each task's gradient at its branch entry point. At epoch
//! boundaries the captured gradients are tensor-train factorized into compact
//! unit vectors, the vectors are clustered by a density method over mutual
//! reachability distances, and tasks whose vectors land in the same cluster
//! get their branches merged. Merging continues until the architecture locks,
//! after which training proceeds on the smaller network.

pub mod datasets;
pub mod error;
pub mod exec;
pub mod gradtap;
pub mod groupmgr;
pub mod harness;
pub mod mtmodel;
pub mod net;
pub mod relcluster;
pub mod tensor;
pub mod ttfact;

pub use error::{Error, Result};
