//! Std companion to `evsynth-core`: registry ingest, parser backends, the
//! filtering pipeline, file formats, simulation, HTTP service and CLI.

pub use evsynth_core as core;

pub mod analysis;
pub mod cli;
pub mod config;
pub mod forest;
pub mod formats;
pub mod montecarlo;
pub mod parsers;
pub mod pipeline;
pub mod registry;
pub mod service;
