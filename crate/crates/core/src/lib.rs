pub mod error;
pub mod numerics;

pub use error::{MuserError, Result};

pub mod cli;
pub mod config;
pub mod contrastive;
pub mod data;
pub mod encoders;
pub mod evaluation;
pub mod signal;
pub mod text;
pub mod training;
