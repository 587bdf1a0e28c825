pub mod attention;
pub mod bench;
pub mod cli;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod io;
pub mod isim;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod tokens;
pub mod train;

pub use error::{Error, Result};
