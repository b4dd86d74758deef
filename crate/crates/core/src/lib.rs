//! # caos
//!
//! Context-aware object similarity (CAOS) scores for object hallucination in
//! captions produced by vision-language models.
//!
//! The evaluation flow for one caption:
//! 1. Parse in-domain objects with the rule-based [`lexicon`] parser.
//! 2. Ask an extraction LLM for further objects, keep only those that occur
//!    verbatim in the caption, and merge both lists in caption order
//!    ([`extraction`]).
//! 3. Label each object genuine or hallucinated: ground truth for in-domain
//!    objects, an ensemble of vision-language endpoints for the rest
//!    ([`oracle`]).
//! 4. Score every hallucinated object against ground-truth objects, preceding
//!    caption objects and the top-k frequent training objects ([`engine`]).
//!
//! All remote models are reached through the [`gateway`], which also provides
//! transcript record/replay and a scripted mock. [`pipeline`] ties the stages
//! together over a dataset and writes reports.

pub mod engine;
pub mod extraction;
pub mod gateway;
pub mod lexicon;
pub mod oracle;
pub mod pipeline;
pub mod similarity;

mod jsonl;

pub use engine::{caos_for_caption, CaosScores, CaptionRecord, RunAggregate};
pub use lexicon::{ObjectMention, Vocabulary};
pub use similarity::{cosine_similarity, EmbeddingStore, ObjectLabel, Vector};
