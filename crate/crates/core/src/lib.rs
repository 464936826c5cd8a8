//! Kernel ridge regression with finite-sample uniform inference.
//!
//! The crate fits KRR in closed form and samples a *symmetrized* Gaussian
//! multiplier process that approximates the law of the whole fitted
//! function, so that sup-norm and RKHS-norm confidence sets come out of the
//! same cached factorization used for the point estimate.
//!
//! | Module | Contents |
//! |--------|----------|
//! | [`kernels`] | kernel families (linear, polynomial, Gaussian, Matérn, Mallows), Gram and cross matrices |
//! | [`krr`] | closed-form fit, prediction, weight vectors |
//! | [`bootstrap`] | multiplier draws, variance profile, fixed/variable/H-norm bands, diagnostics |
//! | [`spectral`] | Gram spectrum, local width, effective dimension, decay fits |
//! | [`simulation`] | data-generating processes and coverage studies |
//! | [`school_choice`] | random-utility preferences, serial dictatorship, IPW match-effect inference |
//!
//! The crate is `no_std` + `alloc` when built with `default-features = false`.
//! The `parallel` feature (on by default) spreads Monte-Carlo replicates over
//! a rayon pool; results never depend on the number of threads because every
//! task draws from its own counter-keyed random substream and reductions run
//! in index order.

#![cfg_attr(not(feature = "std"), no_std)]
#![warn(missing_debug_implementations, rust_2018_idioms)]

extern crate alloc;

pub mod bootstrap;
pub mod error;
pub mod kernels;
pub mod krr;
pub mod linalg;
pub(crate) mod math;
pub mod parallel;
pub mod rng;
pub mod school_choice;
pub mod simulation;
pub mod spectral;

pub use error::{Error, Result};
pub use kernels::{InputPoint, KernelFamily, KernelSpec, MaternSmoothness, Ranking};
pub use krr::{Dataset, EvalGrid, FittedKrr, Lambda};
