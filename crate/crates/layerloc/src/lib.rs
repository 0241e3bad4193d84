//! Synthetic shape datasets, on-disk formats and the `layerloc` experiment
//! driver built on `layerloc-core`.

pub mod cli;
pub mod config;
pub mod data;
pub mod experiment;
pub mod image;
pub mod manifest;
pub mod report;
pub mod weights;
