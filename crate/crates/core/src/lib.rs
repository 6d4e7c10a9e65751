//! Exemplar-free video class-incremental learning on synthetic task streams.

pub mod backbone;
pub mod config;
pub mod datagen;
pub mod error;
pub mod expert;
pub mod fssd;
pub mod gradcheck;
pub mod harness;
pub mod layers;
pub mod losses;
pub mod objective;
pub mod param;
pub mod rng;
pub mod runconfig;
pub mod rundir;
pub mod selftest;
pub mod tdmoe;
pub mod tensor;

pub use error::{Error, Result};
