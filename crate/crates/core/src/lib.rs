//! Fourier-Galerkin toolkit for the Hamiltonian action on loops in `T*T^n` with
//! mixed regularity `H^s x H^{1-s}`.
//!
//! Modules are layered bottom-up: [`loopspace`] (truncated loops and norms),
//! [`operators`] (structural operators as dense matrices), [`estimates`] (series
//! lemmas), [`action`] (the functional and its critical points), [`flow`]
//! (negative gradient flow and diagnostics), [`connections`] (heteroclinic
//! BVPs) and [`complex`] (the mod-2 Morse complex).

mod band;
mod par;

pub mod error;
pub mod loopspace;
pub mod operators;
pub mod estimates;
pub mod action;
pub mod flow;
pub mod connections;
pub mod complex;

pub use error::{Error, Result};
