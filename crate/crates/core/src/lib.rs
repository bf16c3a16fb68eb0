//! Context-aware rescoring of object-detection proposals.
//!
//! A detector emits per-proposal score vectors; this crate treats them as
//! unary evidence in a fully connected pairwise random field whose other
//! terms encode learned object co-occurrence under discrete spatial
//! relations ([`context_stats`]) and a whole-image scene prior
//! ([`scene_prior`]). Approximate marginals come from damped mean-field
//! iteration ([`crf`]), with a brute-force enumeration oracle for small
//! instances. [`eval`] scores detections VOC-style and sweeps the energy
//! weights; [`synth`] generates seeded benchmark scenes with an analytic
//! pairwise oracle.
//!
//! The crate is `no_std` (with `alloc`); file formats and the command-line
//! front end live in the companion CLI crate.

#![cfg_attr(not(feature = "std"), no_std)]

extern crate alloc;

#[cfg(feature = "std")]
extern crate std;

pub mod annotations;
pub mod categories;
pub mod context_stats;
pub mod crf;
pub mod eval;
pub mod geometry;
mod math;
pub mod scene_prior;
pub mod synth;
