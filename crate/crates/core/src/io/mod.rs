//! Model and data loading: safetensors weights, the byte-level BPE
//! tokenizer, synthetic test models, word lists, and dataset files.

pub mod datasets;
pub mod safetensors;
pub mod synth;
pub mod tokenizer;
pub mod words;

pub use safetensors::{load_model, save_model};
pub use synth::synth_model;
pub use tokenizer::Tokenizer;
pub use words::{resolve_targets, ResolvePolicy, TargetTokenSet};
