pub mod dynamics;
pub mod episode;
pub mod error;
pub mod rng;
pub mod scene;
pub mod sensors;
pub mod terrain;

pub use error::{Result, SimError};
