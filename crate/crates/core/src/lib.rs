pub mod cli;
pub mod correlate;
pub mod coupling;
pub mod densities;
pub mod error;
pub mod foliated;
pub mod geometry;
pub mod maps;
pub mod transport;

pub use error::{Error, Result};
