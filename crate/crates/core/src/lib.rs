pub mod bounds;
pub mod demand;
pub mod error;
pub mod games;
pub mod problem;
pub mod risk;
pub mod sets;
pub mod support;
pub mod vi;

mod util;

pub use error::{Error, Result};
