//! Pipeline orchestration for the fact-tracing benchmark: configuration,
//! stage caching and the stage implementations behind the `factrace` binary.

pub mod config;
pub mod pipeline;
pub mod store;

pub use config::RunConfig;
pub use pipeline::{Options, Pipeline, Stage};
