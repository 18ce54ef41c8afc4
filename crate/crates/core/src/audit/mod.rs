//! Second-stage evaluations on sensitive tokens.

mod diversity;
mod fairness;
mod retrieval;

pub use diversity::{eval_diversity, ontology_study, OntologyRow};
pub use fairness::{eval_fairness, leave_one_out};
pub use retrieval::{recall_at_k, retrieve_triggers, RetrievalReport, RetrievalStatus, TriggerCandidate};

use crate::backend::Backend;
use crate::error::Result;
use crate::sweep::with_retry;

/// Black-box backends may not accept embeddings; fall back to prompt conditioning.
pub(crate) fn prompt_conditioning_supported<B: Backend + ?Sized>(backend: &B, retries: u32) -> Result<bool> {
    Ok(with_retry(retries, || backend.info())?.capabilities.prompt_conditioning)
}
