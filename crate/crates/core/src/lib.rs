//! Dense image-correspondence engine.
//!
//! Estimates a dense displacement field `w` between a source and a target
//! image such that `I_t(x) ≈ I_s(x + w(x))`. The architecture combines a
//! single global correlation volume at the coarsest level (long-range
//! matches) with local correlation volumes at finer levels (precise
//! refinement), split across two streams: a base stream running at a fixed
//! resolution and a native stream running at the full input resolution.
//!
//! The crate is self-contained: it ships its own 4-D tensor engine with
//! reverse-mode differentiation ([`tensor`]), the correlation and warping
//! kernels ([`correlation`], [`warp`]), the network itself ([`model`]),
//! synthetic-warp data generation ([`datagen`]), a training loop
//! ([`trainer`]), metrics ([`evaluation`]) and file formats ([`io`]).
//!
//! Kernels parallelize over disjoint output regions with a fixed reduction
//! order, so results are bit-identical for any worker count. The `parallel`
//! feature (default) enables rayon; without it everything runs sequentially.

pub mod config;
pub mod correlation;
pub mod datagen;
pub mod error;
pub mod evaluation;
pub mod io;
pub mod model;
pub mod parallel;
pub mod tensor;
pub mod trainer;
pub mod warp;

pub use error::{DceError, Result};
pub use tensor::{GradientTape, Shape, Tensor};
pub use warp::FlowField;
