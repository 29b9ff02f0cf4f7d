//! Experiment orchestration: transfer tables, FLOP accounting, key
//! attribution and report rendering.

pub mod attribution;
pub mod config;
pub mod flops;
pub mod report;
pub mod transfer;
