//! Lane topology reasoning with redundancy assignment.
//!
//! A lane decoder whose cross-attention runs before self-attention exposes
//! intermediate query sets; those are matched one-to-many against ground-truth
//! lanes to densify topology supervision, while detection keeps one-to-one
//! matching.

pub mod assignment;
pub mod decoder;
pub mod error;
pub mod geometry;
pub mod harness;
pub mod losses;
pub mod metrics;
pub mod numerics;
pub mod scene;
pub mod supervision;
pub mod verification;

pub use error::{Error, Result};
