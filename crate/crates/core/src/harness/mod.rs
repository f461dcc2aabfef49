//! Everything around the network: data, losses, training, checkpoints,
//! evaluation and the command line.

pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod data;
pub mod eval;
pub mod loss;
pub mod pgm;
pub mod selftest;
pub mod train;
