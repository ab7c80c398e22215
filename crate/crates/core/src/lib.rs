pub mod autodiff;
pub mod cli;
pub mod crfi;
pub mod crfr;
pub mod error;
pub mod imagecore;
pub mod integrator;
pub mod mef;
pub mod metrics;
pub mod retinex;
pub mod selftest;
pub mod synthdata;
pub mod training;

pub use error::{Error, Result};
