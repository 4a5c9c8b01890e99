pub mod cli;
pub mod configuration;
pub mod dynamics;
pub mod error;
pub mod exact;
pub mod experiments;
pub mod io;
pub mod limits;
pub mod model;
pub mod report;
pub mod rng;
pub mod sampling;
pub mod special;

pub use configuration::Configuration;
pub use error::{Error, Result};
pub use model::{ModelParams, WeightTable};
