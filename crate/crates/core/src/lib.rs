pub mod augment;
pub mod autodiff;
pub mod checks;
pub mod config;
pub mod data;
pub mod downstream;
pub mod encoder;
pub mod error;
pub mod optim;
pub mod paws;
pub mod pipeline;
pub mod rng;

pub use error::{Error, Result};
