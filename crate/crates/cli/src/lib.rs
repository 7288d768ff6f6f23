//! Library side of the `ctxmod` binary.

pub mod app;
pub mod config;
pub mod grid;
