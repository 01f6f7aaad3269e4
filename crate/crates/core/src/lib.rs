//! Video classifier with a lightweight 3D-CNN branch and a few-global-token
//! transformer branch, coupled by bidirectional cross-attention.
//!
//! The crate provides the building blocks with forward and backward passes
//! ([`tensor`], [`nn`]), variant assembly and checkpoints ([`model`]), exact
//! multiply-accumulate and parameter accounting ([`complexity`]), and a
//! synthetic-video training harness ([`harness`]).

pub mod category;
pub mod complexity;
pub mod error;
pub mod harness;
pub mod model;
pub mod nn;
pub mod tensor;

pub use category::{Category, Tally};
pub use error::{Error, Result};
pub use tensor::{Graph, Scalar, Tensor, Var};
