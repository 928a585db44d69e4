pub mod channel;
pub mod error;
pub mod eval;
pub mod message;
pub mod net;
pub mod protocol;
pub mod tape;
pub mod training;

pub use error::{Error, Result};
