//! Drift correction for plane-based indoor mapping against BIM floorplans.
//!
//! The library aligns planar wall observations produced by an online mapping
//! system with the wall faces of a known building model, continuously
//! re-estimating the rigid transform between the mapping frame and the model
//! frame. The modules are layered bottom-up:
//!
//! * [`geometry`]: rigid transforms and bounded plane patches.
//! * [`bim`]: floorplan loading, wall splitting, per-wall frames.
//! * [`matching`]: statistical plane-to-wall association.
//! * [`estimation`]: Gauss-Newton alignment with degeneracy handling.
//! * [`session`]: keyframe pipeline with the three correction variants.
//! * [`simulator`]: deterministic scene, trajectory, drift and noise synthesis.
//! * [`metrics`]: per-keyframe error metrics and variant comparison.

pub mod bim;
pub mod estimation;
pub mod geometry;
pub mod matching;
pub mod metrics;
pub mod session;
pub mod simulator;
