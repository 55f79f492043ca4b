//! Scene IO, synthetic data, training, evaluation, ablations and inspection
//! tools around [`sdt_core`].

pub mod ablate;
pub mod checkpoint;
pub mod commands;
pub mod config;
pub mod inspect;
pub mod pipeline;
pub mod report;
pub mod scene_io;
pub mod seed;
pub mod synth;
pub mod train;

pub use sdt_core as core;
