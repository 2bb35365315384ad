//! Adversarial evaluation of transformer circuits.
//!
//! A circuit is a subset of the edges of a transformer's computational graph.
//! This crate runs the circuit with every other edge resample-ablated, measures
//! the KL divergence between the full model's and the circuit's next-token
//! distributions over many (clean, corrupted) input pairs, and provides the
//! order-statistic machinery for turning such samples into high-probability
//! upper bounds on percentiles of that divergence.
//!
//! Modules, bottom up:
//!
//! - [`model`]: toy decoder-only transformer with an additive residual stream
//! - [`graph`]: nodes, edges and circuits over a model configuration
//! - [`ablation`]: resample-ablated forward passes and batched KL evaluation
//! - [`stats`]: KL divergence, summary tables, percentile bounds
//! - [`tasks`]: prompt templates, tokenizer and clean/corrupt pairing
//! - [`harness`]: end-to-end evaluation runs and reports

pub mod ablation;
pub mod error;
pub mod graph;
pub mod harness;
pub mod model;
pub mod stats;
pub mod tasks;

pub use ablation::{batch_patched_kl, patched_forward, PatchedRunResult};
pub use error::{Error, Result};
pub use graph::{Circuit, EdgeId, InputChannel, NodeId};
pub use model::{random_model, ActivationCache, Distribution, Model, ModelConfig};
pub use stats::{kl_divergence, summarize, SummaryTable};
pub use tasks::{PairingMode, PromptInstance, TaskKind, TaskTemplate, Tokenizer};
