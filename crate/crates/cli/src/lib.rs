//! Pipeline orchestration behind the `softbody` binary: configuration,
//! the four stages, and SVG output.

pub mod config;
pub mod pipeline;
pub mod svg;

pub use config::{RunConfig, UsageError};
pub use pipeline::Run;
