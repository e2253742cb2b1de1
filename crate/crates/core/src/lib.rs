pub mod attribution;
pub mod cli;
pub mod backbone;
pub mod config;
pub mod corpus;
pub mod error;
pub mod evaluation;
mod fsutil;
pub mod seed;
pub mod siamese;
pub mod toy;

pub use error::{Error, Result};
