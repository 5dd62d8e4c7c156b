//! Multi-view contrastive learning from demonstrations.
//!
//! A small differentiable-computation backbone ([`autodiff`], [`params`]),
//! the DeskCNN encoder and projection head ([`models`]), the NT-Xent and
//! triplet objectives ([`losses`]), a synthetic multi-camera pick-and-place
//! dataset ([`data`]), the contrastive training loop ([`train`]), alignment
//! and stage-probe evaluation ([`eval`]) and a DDPG + HER agent that uses the
//! learned embeddings as state and reward ([`rl`]).

pub mod autodiff;
pub mod checkpoint;
pub mod data;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod losses;
pub mod models;
pub mod params;
pub mod rl;
pub mod rng;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::{Precision, Scalar, Tensor};
