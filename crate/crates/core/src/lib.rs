pub mod checkpoint;
pub mod config;
pub mod corpus;
pub mod encoder;
pub mod error;
pub mod evaluation;
pub mod graph;
pub mod loss;
pub mod model;
pub mod pair_head;
pub mod params;
pub mod prompt;
pub mod relation_head;
pub mod span_head;
pub mod text;
pub mod training;

pub use error::{Error, Result};
