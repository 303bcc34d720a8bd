//! Semantic equivariant mixup at desk scale.
//!
//! The crate bundles a small reverse-mode autodiff engine ([`tensor`]),
//! models split into a feature extractor and a linear head ([`models`]),
//! mixup-family transforms ([`mixing`]), the representation-level
//! equivariance penalty and its training loop ([`training`]), evaluation
//! probes ([`evaluation`]) and dataset readers/generators ([`data`]).

pub mod data;
pub mod error;
pub mod evaluation;
pub mod mixing;
pub mod models;
pub mod optim;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
pub use tensor::{Tape, Tensor, Var};
