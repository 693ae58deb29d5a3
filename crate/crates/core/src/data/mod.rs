//! On-disk data: silhouette datasets, the synthetic generator, checkpoints
//! and embedding files.

pub mod checkpoint;
mod dataset;
pub mod embeddings;
pub mod pgm;
pub mod synth;

pub use dataset::{
    load_frame, load_sequences, normalize, scan, split, DatasetIndex, LoadedSequence, Protocol, SequenceEntry, Split,
    SubjectEntry, FRAME_HEIGHT, FRAME_WIDTH,
};
pub use embeddings::{read_embeddings, write_embeddings, EmbedFormat};
pub use synth::{synth_generate, SynthConfig};
