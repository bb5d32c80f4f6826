pub mod cohomology;
pub mod coupling;
pub mod error;
pub mod fit;
pub mod intermittent;
pub mod model;
pub mod observables;
pub mod returns;
pub mod rng;
pub mod stats;
pub mod tower;
pub mod validate;

pub use error::{ConfigIssue, Error, Result};
