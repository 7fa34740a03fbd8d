//! Police-briefing structured extraction: corpus cleaning, the extraction
//! record schema, model-output parsing, prompt and dataset synthesis,
//! evaluation metrics, cross-validated scoring and a batch client for
//! chat-completions endpoints.

pub mod corpus;
pub mod metrics;
pub mod outparse;
pub mod schema;
pub mod eval;
pub mod promptkit;
pub mod inferclient;
