//! Trust-aware multi-agent visual classification.
//!
//! Vision agents answer with `(category, justification, confidence)`; a
//! non-visual arbiter combines them, weighting each agent by an offline trust
//! profile and, when trust is low, re-prompting agents with retrieval
//! evidence from an exact embedding index before deciding.

pub mod evaluation;
pub mod gateway;
pub mod model;
pub mod orchestrator;
pub mod runlog;
pub mod runner;
pub mod trust;
pub mod vector_store;
