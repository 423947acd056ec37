pub mod cli;
pub mod device;
pub mod error;
pub mod exec;
pub mod formats;
pub mod ioengine;
pub mod latency;
pub mod mask;
pub mod profile;
pub mod reorder;
pub mod select;
pub mod tune;

pub use error::{Error, Result};
pub use exec::Exec;
