//! Temporal contextualization: seed selection, context summarization and
//! context-infused attention.

pub mod attention;
pub mod merge;
pub mod select;

pub use attention::{tc_attention, AttentionOutput, AttentionWeights, ContextBias};
pub use merge::{bipartite_merge, summarize_context, ContextSet, MergeEvent};
pub use select::{cls_attention_scores, select_seeds, SeedSelection};
