pub mod builder;
pub mod crash;
pub mod durable;
pub mod engine;
pub mod error;
pub mod ids;
pub mod lock;
pub mod oplog;
pub mod ops;
pub mod process;
pub mod store;
pub mod table;
pub mod tablestring;

pub use error::{Error, Result};
