//! Branched-transport limit energy for type-I superconductors.
//!
//! The central object is [`PolygonalMeasure`], a finite tree of flux-carrying
//! affine segments in the periodic box `Q_L x [-T, T]`. Around it sit exact
//! energy evaluation, Wasserstein distances between horizontal slices, the
//! dyadic branching constructions, a fixed-topology optimizer, the
//! one-dimensional wall profile, the rectangle-to-disk map, and a staggered
//! grid synthesizer for flux-tube fields.

// `!(x > 0.0)` is used on purpose so NaN fails validation.
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod builder;
pub mod energy;
pub mod error;
pub mod field;
pub mod geometry;
pub mod lab;
pub mod measure;
pub mod optimizer;
pub mod profile;
pub mod quantize;
pub mod rectdisk;
pub mod transport;

pub use energy::{total_energy, EnergyBreakdown, K_STAR};
pub use error::{Error, Result};
pub use geometry::{torus_distance, TorusPoint};
pub use measure::{validate, Atom, DiracSlice, Node, PolygonalMeasure, Segment};
