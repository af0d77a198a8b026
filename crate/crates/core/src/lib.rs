pub mod checkpoint;
pub mod error;
pub mod host;
pub mod layers;
pub mod maskviz;
pub mod mixsim;
pub mod params;
pub mod sidecar;
pub mod train;

pub use error::{Error, Result};
pub mod objectives;
