//! Runtime for composing applications out of beads, weaves and strings:
//! private data contexts over shared code, GOT-indirected namespaces,
//! lightweight schedulable flows, checkpointing and island migration.

mod codec;
pub mod elfscan;
pub mod error;
pub mod heap;
pub mod ids;
pub mod migrate;
pub mod registry;
pub mod runtime;
pub mod snapshot;
pub mod strings;
pub mod tapestry;
pub mod vm;
pub mod weaver;
pub mod wire;
pub mod wof;

pub use error::{Error, Result};
pub use runtime::{Runtime, RuntimeOptions};
