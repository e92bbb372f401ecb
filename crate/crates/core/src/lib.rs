pub mod backbone;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod eval;
pub mod experiment;
pub mod fusion;
pub mod gradsuite;
pub mod losses;
pub mod numerics;
pub mod semisup;

pub use error::{Error, Result};
