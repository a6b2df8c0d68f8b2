pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod corpus;
pub mod error;
pub mod dialogue;
pub mod eval;
pub mod graph;
pub mod incremental;
pub mod knowledge;
pub mod model;
pub mod optim;
pub mod params;
pub mod selector;
pub mod service;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
