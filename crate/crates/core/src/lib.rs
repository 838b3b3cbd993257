pub mod autodiff;
pub mod biasnet;
pub mod buffer;
pub mod datasets;
pub mod dynamics;
pub mod energy;
pub mod error;
pub mod io;
pub mod metrics;
pub mod objective;
pub mod selfcheck;
pub mod trainer;

pub use error::{Error, Result};
