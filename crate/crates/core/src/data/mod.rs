//! Dataset ingestion and synthetic generators.

mod idx;
mod synth;

pub use idx::{load_idx, parse_idx, write_idx, IdxTensor};
pub use synth::{gaussian_factor, synth_clusters, synth_gaussian, synth_linear_gaussian, LabeledSamples};
