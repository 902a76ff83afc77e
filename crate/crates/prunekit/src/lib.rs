//! Encoder dump IO, report writers and the `prunekit` command line, on top of
//! [`prunekit_core`].

pub mod cli;
pub mod config;
pub mod dump_io;
pub mod npy;
pub mod report;

pub use prunekit_core as core;
