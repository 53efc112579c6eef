//! Virtual-experiment simulator for the single-donor flip-flop qubit.
//!
//! The crate is organised around the layers of a real measurement stack:
//!
//! - [`spin`]: the ³¹P electron–nuclear spin Hamiltonian, its flip-flop
//!   truncation and the closed-form transition frequencies.
//! - [`pulse`]: pulse segments and sequences, and the propagator that drives a
//!   four-level state through them (lab or rotating frame, with or without the
//!   rotating-wave approximation).
//! - [`noise`]: relaxation channels, quasi-static and telegraph dephasing, the
//!   ²⁹Si nuclear bath and the empirical pulse-induced resonance shift models.
//! - [`measurement`]: Monte-Carlo single-shot electron readout, QND nuclear
//!   readout, flip statistics and ENDOR initialisation.
//! - [`benchmark`]: the 24-element Clifford table over the native gate set and
//!   randomized benchmarking.
//! - [`analysis`]: damped least-squares fitting of the decay and spectrum
//!   shapes, attenuation calibration arithmetic and 1-D frequency clustering.
//! - [`triangulate`]: finite-difference electrostatics over a gate layout and
//!   the slope-likelihood map used to locate the donor.
//! - [`experiment`]: declarative experiment specs and the runner that turns
//!   them into reproducible CSV/JSON bundles.
//!
//! Units follow one convention throughout the coherent dynamics: frequencies in
//! MHz and times in µs, so `2π·f·t` is dimensionless. Relaxation and bath
//! dynamics use seconds; noise offsets are quoted in kHz at the API boundary.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod analysis;
pub mod benchmark;
pub mod experiment;
pub mod linalg;
pub mod measurement;
pub mod noise;
pub mod pulse;
pub mod rng;
pub mod spin;
pub mod triangulate;

pub use spin::{DonorParameters, PhysicalConstants, SpinSystem, TransitionFrequencies};
