pub mod archive;
pub mod bootstrap;
pub mod carc;
pub mod channel;
pub mod derivation;
pub mod error;
mod fsutil;
pub mod hash;
pub mod manifest;
pub mod sexpr;
pub mod store;
pub mod substitute;
pub mod transport;
