//! Embedding and interaction ingestion, splits, popularity statistics and a
//! synthetic corpus generator.

mod embeddings;
mod freq;
mod interactions;
mod synth;

pub use embeddings::{load_embeddings, save_embeddings, EmbeddingTable};
pub use freq::{frequency_bin_assign, FrequencyBins};
pub use interactions::{
    five_core_filter, k_core_filter, load_interactions, parse_interactions, save_interactions,
    InteractionDataset, Split, UserSequence,
};
pub use synth::{synth_dataset, SynthConfig, SynthOutput};
