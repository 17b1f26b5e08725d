//! File formats, experiment drivers and the command-line front end for
//! [`ofl_core`].

mod bytes;
pub mod checkpoint;
pub mod cli;
pub mod error;
pub mod experiment;
pub mod manifest;
pub mod pairfile;
pub mod render;
pub mod table;

pub use error::{OflError, Result};
