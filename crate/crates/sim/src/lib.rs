//! Command-line runner and live operator server.

pub mod server;
