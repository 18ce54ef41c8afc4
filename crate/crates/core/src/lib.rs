//! Grey-box auditing of text-to-image models.
//!
//! The harness measures how stable a model's generations are under small
//! multiplicative perturbations of the text-encoder output ([`sweep`]),
//! characterizes tokens by generative diversity and fairness ([`audit`]),
//! and uses both to surface likely bias triggers. Models are reached through
//! the [`backend::Backend`] trait, either in-process or over JSON/HTTP.

pub mod audit;
pub mod backend;
pub mod config;
pub mod error;
pub mod ingest;
pub mod metrics;
pub mod perturb;
pub mod report;
pub mod seed;
pub mod sweep;
pub mod types;

pub use config::{Aggregation, AuditConfig};
pub use error::{Error, Result};
pub use types::{Conditioning, EmbeddingMatrix, GenerationRequest, ImageFeature, Scope, SensitivityRecord, TokenInfo};
