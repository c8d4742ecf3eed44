//! HTTP gateway and CLI around `homegate-core`.

pub mod app;
pub mod cli;
pub mod config;
