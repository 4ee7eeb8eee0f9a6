pub mod cst;
pub mod dgds;
pub mod engine;
pub mod error;
pub mod kvpool;
pub mod presets;
pub mod scheduler;
pub mod study;
pub mod util;
pub mod workload;

pub use error::{Error, Result};
