//! Core domain logic for promptloop: collaborative prompt editing, provider
//! access, batch generation, blinded evaluation and agreement analytics.

pub mod analytics;
pub mod batch;
pub mod dataset;
pub mod evaluation;
pub mod prompt;
pub mod provider;
pub mod sync;
