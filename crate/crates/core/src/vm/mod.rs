//! The weave virtual machine: paged memory and the bytecode executor.

pub mod exec;
pub mod memory;

pub use exec::{ExecStatus, Frame, OutputEvent, OutputValue, TrapReason};
pub use memory::{MemFault, Region, RegionKind, VmMemory};
