//! Command-line interface and HTTP service.
pub mod commands;
pub mod server;
