//! Command-line front end and HTTP service for the vidscript pipeline.

pub mod episodes;
pub mod hub;
pub mod options;
pub mod server;
