//! Harmful meme classification engine.
//!
//! A meme is first converted to text by asking a vision model a series of
//! atomic questions and merging the answers with a text model. The resulting
//! description is classified by a text model under chain-of-thought prompting,
//! optionally guided by human-written guideline sets, and the per-scheme
//! verdicts from two vision sources are merged with a confidence-level
//! decision table.

pub mod classifier;
pub mod corpus;
pub mod digest;
pub mod ensemble;
pub mod evalkit;
pub mod gateway;
pub mod guidelines;
pub mod meme2text;
pub mod pipeline;
pub mod runstore;
pub mod target;
pub mod templates;

pub use classifier::{ExtractionStatus, Scheme, SchemeVerdict};
pub use corpus::{ConfidenceLevel, ContextId, DatasetContext, Label, MemeRecord};
pub use gateway::{Gateway, ModelEndpoint};
pub use guidelines::{GuidelineRule, GuidelineSet, Principle};
pub use templates::TemplateStore;
