pub mod basis;
pub mod error;
pub mod fpca;
pub mod model;
pub mod quantile;
pub mod sim;
pub mod solver;

pub use error::{Error, Result};
