//! Single-node PGAS communication runtime over named POSIX shared memory.
//!
//! Every processing element (PE) of a job owns one shared-memory segment
//! holding its *symmetric heap*. All PEs allocate from their heaps with the
//! same deterministic allocator and make allocation calls collectively, so a
//! symmetric object lives at the same heap offset on every PE. A remote
//! address is therefore never exchanged: it is reconstructed as
//! `remote_base + (local_addr - local_base)`, which this crate encodes by
//! passing heap-relative offsets ([`SymAddr`]) instead of raw pointers.
//!
//! The pieces:
//!
//! * [`symheap`]: segment creation/attachment, the deterministic symmetric
//!   allocator, and the [`World`] handle tying a PE to its job.
//! * [`datamover`]: one-sided `put`/`get` built on pluggable copy strategies.
//! * [`collectives`]: barrier, broadcast, and reduction over a per-PE
//!   progress descriptor that tolerates any arrival order.
//! * [`sync`]: named locks and remote atomics on symmetric cells.
//! * [`rte`]: the job launcher (spawn, IO/signal forwarding, cleanup).
//! * [`bench`]: the latency/bandwidth measurement harness and CSV schema.

pub mod bench;
pub mod collectives;
pub mod datamover;
pub mod error;
pub mod rte;
pub mod symheap;
pub mod sync;

mod alloc;
mod layout;
mod shm;
mod wait;

pub use collectives::{BcastAlgo, ReduceAlgo, ReduceOp};
pub use datamover::CopyStrategy;
pub use error::PoshError;
pub use rte::{ChildRecord, JobSpec};
pub use symheap::{InitConfig, SymAddr, World};

/// Crate-wide result alias.
pub type Result<T> = std::result::Result<T, PoshError>;
