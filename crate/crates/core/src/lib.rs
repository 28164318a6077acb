pub mod error;
pub mod config;
pub mod eval;
pub mod features;
pub mod forest;
pub mod fusion;
pub mod granularity;
pub mod io;
pub mod markov;
pub mod matrix;
pub mod neuralseq;
pub mod pipeline;
pub mod querysim;
pub mod rng;
pub mod synthgen;
pub mod trajectory;

pub use error::{Error, Result};
