//! Entity-bias mitigation toolkit.
//!
//! Entity bias is a model's tendency to predict from memorized entity-label
//! associations instead of the given context. This crate implements two
//! causal interventions against it, plus the machinery to measure them:
//!
//! - **Training-time intervention** for trainable models: perturb an entity
//!   embedding inside the convex hull spanned by the entity and its k nearest
//!   neighbors during training, and replace it with the hull center at
//!   inference ([`intervention`], [`classifier`]).
//! - **In-context intervention** for black-box completion APIs: replace
//!   entity mentions with placeholders, expand each entity into a set of
//!   similar entities, define the placeholders by those sets in randomized
//!   order, and query with the rewritten prompt ([`incontext`]).
//!
//! Supporting pieces: an immutable entity-embedding store ([`embedding`]),
//! exact kNN search ([`neighbors`]), baseline entity transforms (mask,
//! substitution, logit correction), a synthetic corpus generator that plants
//! entity-label shortcuts at a controlled rate ([`data`]), evaluation metrics
//! (micro-F1, update/memorization probabilities, memorization ratio,
//! [`metrics`]), and a seeded experiment runner ([`experiment`]).

pub mod classifier;
pub mod data;
pub mod embedding;
pub mod experiment;
pub mod incontext;
pub mod intervention;
pub mod llm;
pub mod metrics;
pub mod neighbors;
pub mod seeds;

pub use classifier::{Instance, LabelSet, RelationLabel, SoftmaxModel, TrainConfig};
pub use embedding::{EmbeddingTable, EntityId, EntityRecord};
pub use intervention::{InterventionConfig, InterventionMode};
pub use metrics::{EvalRecord, MetricsReport};
