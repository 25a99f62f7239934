pub mod error;
pub mod flowmatch;
pub mod sampler;
pub mod trainer;
pub mod codec;
pub mod conditioning;
pub mod degrade;
pub mod dit;
pub mod harness;
pub mod numerics;

pub use error::{Error, Result};
