//! Visual commonsense graph modeling at desk scale.
//!
//! The crate covers the full pipeline: corpus storage and statistics
//! ([`graph`]), a seeded synthetic corpus generator ([`synth`]), a word-level
//! tokenizer with the special-token scheme ([`token`]), a reverse-mode
//! autodiff tensor engine with Adam ([`autodiff`]), the single-stream
//! vision-language decoder transformer and its training losses ([`model`]),
//! autoregressive decoders ([`decode`]), and generation/ranking metrics
//! ([`metrics`]).

pub mod autodiff;
pub mod decode;
pub mod graph;
pub mod metrics;
pub mod model;
pub mod seeds;
pub mod synth;
pub mod tensorfile;
pub mod token;

pub use graph::{Corpus, EventRecord, Inference, PersonTag, Relation, Split, VisualScene};
pub use token::{TokenSeq, Vocab};
