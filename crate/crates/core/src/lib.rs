pub mod baselines;
pub mod constraints;
pub mod data;
pub mod error;
pub mod io;
pub mod linalg;
pub mod model;
pub mod phase;
pub mod solver;

pub use error::{Error, Result};
