//! Event-sourced service tying the promptloop modules together, plus the
//! HTTP and sync stream layer in front of it.

pub mod auth;
pub mod config;
pub mod error;
pub mod events;
pub mod http;
pub mod service;
pub mod state;

pub use error::{ErrorClass, ServiceError};
pub use service::{Service, ServiceOptions};
