//! Coarse-to-fine generation of weekly human-mobility trajectories.
//!
//! The pipeline has two learned components built on a small reverse-mode
//! autodiff engine:
//!
//! - a multi-scale tokenizer that maps a trajectory onto a ladder of
//!   spatial/temporal resolutions and compresses it into per-scale residual
//!   token sequences drawn from one shared codebook, and
//! - a next-scale transformer that, conditioned on a user's movement
//!   attributes, autoregressively predicts whole token maps scale by scale
//!   instead of location by location.
//!
//! Around them sit a synthetic mobility corpus generator, a fidelity metric
//! suite (distributional JSD statistics, flow/density errors, CPC,
//! diversity, and nearest-neighbour similarity), and a deterministic
//! file-based pipeline exposed both as a library and through the `mstar`
//! binary. See the `examples/` directory for one runnable program per
//! capability.

pub mod autodiff;
pub mod data;
pub mod metrics;
pub mod nn;
pub mod pipeline;
pub mod star;
pub mod tokenizer;
