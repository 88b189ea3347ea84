//! Command implementations and the HTTP render service behind the `avatar`
//! binary.

pub mod commands;
pub mod render;
pub mod server;
