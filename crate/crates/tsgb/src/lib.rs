//! File formats, datasets, reports and the command-line front end for `tsgb-core`.

pub mod app;
pub mod config;
pub mod dataset;
pub mod nnsm;
pub mod pnm;
pub mod report;
