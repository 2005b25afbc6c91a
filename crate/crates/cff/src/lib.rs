//! File formats, checkpoints, the layer pipeline, reports and the
//! experiment CLI around `cff-core`.

pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod formats;
pub mod gradcheck;
pub mod pipeline;
pub mod plot;
pub mod report;
