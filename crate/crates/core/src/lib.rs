//! Spectral laboratory for Laplacians on domains carrying small Neumann resonators.
//!
//! The crate builds slit domains, meshes them with duplicated crack nodes,
//! assembles P1 stiffness and mass matrices, computes the lowest eigenpairs,
//! and compares them with the spectrum of the limit operator. A designer
//! module tunes window sizes so that eigenvalues of a narrowed waveguide hit
//! prescribed targets.

// `!(x > 0.0)` is used on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod capacity;
pub mod designer;
pub mod geometry;
pub mod harness;
pub mod mesh;
pub mod model;
pub mod numerics;
mod quadtree;
