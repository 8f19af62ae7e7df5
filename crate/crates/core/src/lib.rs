pub mod acoustic;
pub mod config;
pub mod dgd;
pub mod error;
pub mod experiments;
pub mod grids;
pub mod io;
pub mod metrics;
pub mod nn;
pub mod par;
pub mod phantom;
pub mod unet;
pub mod variational;

pub use error::{Error, Result};
