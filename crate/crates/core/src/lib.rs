pub mod agent;
pub mod amr;
pub mod dataset;
pub mod environment;
pub mod error;
pub mod evaluation;
pub mod guidance;
pub mod llm;
pub mod reward;
pub mod tep;
pub mod trainer;

pub use error::{Error, Result};
