//! Federated deep equilibrium learning: the numerical core.
//!
//! Everything in this crate is allocation-only (`no_std` + `alloc`) and free of
//! IO. The layer it is built around is the implicit map
//!
//! ```text
//! z* = φ(B z* + C x + b)
//! ```
//!
//! whose fixed point is found by [`deq::solve_plain`] or [`deq::solve_anderson`],
//! kept well-posed by projecting `B` onto an ∞-norm ball ([`projection`]), and
//! differentiated with the implicit function theorem ([`implicit`]). A dense
//! personalized head sits on top of the equilibrium ([`model`]), and the node-level
//! pieces of the ADMM consensus scheme live in [`admm`].
//!
//! Orchestration across many nodes, data handling and the CLI live in the
//! `fedeq-sim` crate.

#![cfg_attr(not(feature = "std"), no_std)]

extern crate alloc;

pub mod activation;
pub mod admm;
pub mod deq;
pub mod error;
pub mod implicit;
pub mod model;
pub mod projection;
pub mod tensor;

pub use activation::Activation;
pub use deq::{DeqParams, FixedPointResult, SolverMethod, SolverSettings};
pub use error::{Error, Result};
pub use implicit::{BackwardMode, DeqGrads};
pub use model::{Batch, HeadGrads, HeadParams, LossKind, WarmCache};
pub use projection::ProjectionSettings;
pub use tensor::{Matrix, Vector};
