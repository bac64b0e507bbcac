//! Multi-agent knowledge augmentation for trial-centric patient matching.
//!
//! Eligibility criteria are probed for knowledge gaps, routed to an
//! augmentation agent, checked by a supervisor and then applied to every
//! patient by a zero-shot matcher. All model traffic goes through
//! [`gateway`], which can record, replay or script responses so that whole
//! runs are reproducible.

pub mod agents;
pub mod corpus;
pub mod digest;
pub mod evaluation;
pub mod gateway;
pub mod knowledge;
pub mod pipeline;

pub use corpus::{CriteriaCatalog, Criterion, CriterionId, EligibilityLabel};
pub use digest::Digest;
