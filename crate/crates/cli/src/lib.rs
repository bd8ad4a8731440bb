//! Command-line front end and HTTP API for the memelens engine.

pub mod api;
pub mod commands;
