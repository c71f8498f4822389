//! Command-line tool and HTTP API for the corpusqa engine.

pub mod cli;
pub mod server;
