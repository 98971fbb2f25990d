//! Few-shot tabular classification harness: table ingestion, split-aware
//! prompt construction, chat-completion inference with constrained binary
//! decoding, fine-tuning exports, and evaluation against classical baselines.

pub mod inference;
pub mod interpret;
pub mod baseline;
pub mod export;
pub mod lasso;
pub mod metrics;
pub mod missing;
pub mod pool;
pub mod prompt;
pub mod record;
pub mod runner;
pub mod select;
pub mod split;
pub mod synth;
pub mod table;
