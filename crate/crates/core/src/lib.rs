//! Virtual scanning-defect-microscopy laboratory for coupled resonator
//! lattices: lattice construction, normal modes, driven transmission,
//! probe models, virtual scans, weight reconstruction and scoring.

// `!(x > 0.0)` is used on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod analysis;
pub mod artifact;
pub mod cli;
pub mod design;
pub mod fit;
pub mod lattice;
pub mod plot;
pub mod probe;
pub mod scanner;
pub mod spectral;
pub mod transmission;
pub mod weights;
