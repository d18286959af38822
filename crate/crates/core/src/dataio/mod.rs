//! Frame files, synthetic data and checkpoints.

pub mod checkpoint;
pub mod pnm;
pub mod store;
pub mod synth;

pub use checkpoint::Checkpoint;
pub use pnm::{read_frame, read_labels, write_frame, write_labels, LabelMap, Raster};
pub use store::{write_sequences, SequenceStore};
pub use synth::{generate, ShapeKind, ShapeTrack, SyntheticSequence};
