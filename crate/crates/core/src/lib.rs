pub mod bench;
pub mod config;
pub mod dynamics;
pub mod error;
pub mod imm;
pub mod linalg;
pub mod ma_ukf;
pub mod pipeline;
pub mod policy;
pub mod rng;
pub mod train;
pub mod ukf;

pub use error::{Error, Result};
