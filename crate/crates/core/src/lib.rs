//! Online multi-label tag recognition combined with image-text contrastive
//! pretraining.

pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod data;
pub mod error;
pub mod eval;
pub mod graph;
pub mod lexicon;
pub mod losses;
pub mod model;
pub mod optim;
pub mod supervision;
pub mod tagger;
pub mod trainer;

pub use error::{Error, Result};
