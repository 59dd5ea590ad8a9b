//! Trajectory data model: grids, the scale ladder, synthetic corpus
//! generation, attribute derivation, splitting, and file I/O.

pub mod corpus;
pub mod error;
pub mod grid;
pub mod io;
pub mod ladder;
pub mod synth;

pub use corpus::{
    derive_attributes, map_to_scale, scale_sequences, split_corpus, Corpus, MovementAttributes,
    PatternLabel, Trajectory,
};
pub use error::DataError;
pub use grid::{coarsen_cell, GridSpec};
pub use io::{read_corpus, write_corpus};
pub use ladder::{LadderSpec, ScaleLadder, ScaleLevel};
pub use synth::{random_walk_corpus, synth_corpus, uniform_random_corpus, SynthConfig};
