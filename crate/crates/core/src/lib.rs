//! Distributed larger-than-memory key-value store.

pub mod address;
pub mod bench;
pub mod client;
pub mod cluster;
pub mod codec;
pub mod epoch;
pub mod hash;
pub mod index;
pub mod io;
pub mod log;
pub mod metadata;
pub mod ownership;
pub mod server;
pub mod shared_tier;
pub mod store;
pub mod transport;
pub mod wire;

pub use address::Address;
pub use store::{Store, StoreConfig, StoreError, StoreSession};
