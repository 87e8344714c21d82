//! Estimating how much social bots move the opinions of the humans who follow them.

pub mod analytics;
pub mod botdetect;
pub mod config;
pub mod ghic;
pub mod graph;
pub mod ingest;
pub mod opinion;
pub mod pipeline;
pub mod stats;
pub mod synth;
