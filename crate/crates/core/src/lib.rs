pub mod ada;
pub mod domain;
pub mod enn;
pub mod error;
pub mod evidence;
pub mod experiment;
pub mod loss;
pub mod metrics;
pub mod pool;
pub mod sampler;
pub mod special;

pub use error::{Error, Result};
