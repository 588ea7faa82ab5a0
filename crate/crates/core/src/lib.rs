//! Text-only synthesis of vision-language training data.
//!
//! The pipeline expands sparse caption seeds into detailed captions with a
//! chat LLM, turns a sampled subset into multi-turn instruction dialogues,
//! encodes captions into a shared embedding space, and converts the text
//! embeddings into synthetic image representations by subtracting the
//! corpus mean. A self-contained simulator generates paired clouds obeying
//! the constant-offset-plus-noise gap model and measures how much
//! mean-centering recovers, and a metrics suite reports lexical diversity
//! and length statistics for any corpus the pipeline produces.
//!
//! Everything runs offline against deterministic mock backends; HTTP chat
//! and embedding backends plug in through the same interfaces.

pub mod caption;
pub mod checkpoint;
pub mod embedding;
pub mod encoder;
pub mod gap;
pub mod gateway;
pub mod instruct;
pub mod json;
pub mod metrics;
pub mod pack;
pub mod rng;
pub mod seed;
pub mod shard;
pub mod text;
pub mod transfer;
