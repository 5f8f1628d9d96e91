//! Error type shared by all runtime modules.

use thiserror::Error;

/// Everything that can go wrong inside the runtime.
///
/// Programming errors that safe mode catches (bounds, shape mismatches,
/// lock misuse) get their own variants so tests can assert on them; OS-level
/// failures carry the failing call and errno text.
#[derive(Debug, Error)]
pub enum PoshError {
    /// A shared-memory or process syscall failed.
    #[error("{call} failed: {errno}")]
    Os { call: &'static str, errno: std::io::Error },

    /// Required environment variable missing or unparseable.
    #[error("bad environment: {0}")]
    BadEnv(String),

    /// Invalid user-supplied configuration (npes, heap size, jobid).
    #[error("invalid configuration: {0}")]
    BadConfig(String),

    /// A segment name is already taken by a live process.
    #[error("segment {name} already exists and owner pid {pid} is alive")]
    NameCollision { name: String, pid: i32 },

    /// A peer segment never became ready within the attach budget.
    #[error("timed out attaching to rank {rank} segment {name}")]
    AttachTimeout { rank: u32, name: String },

    /// Peer segment header disagrees on ABI, npes, or capacity.
    #[error("rank {rank} heap mismatch: {what}")]
    HeapMismatch { rank: u32, what: String },

    /// Allocation request cannot be satisfied.
    #[error("out of symmetric heap memory (requested {requested} bytes)")]
    OutOfMemory { requested: u64 },

    /// Zero-size or otherwise unusable allocation request.
    #[error("invalid allocation size: {0}")]
    InvalidSize(String),

    /// Alignment not a power of two, or a misaligned typed access.
    #[error("bad alignment: {0}")]
    BadAlignment(String),

    /// Free of a pointer the allocator does not own, or freed twice.
    #[error("invalid free at offset {offset:#x}: {what}")]
    InvalidFree { offset: u64, what: &'static str },

    /// Safe mode caught an out-of-bounds transfer.
    #[error("transfer out of heap bounds: offset {offset:#x} len {len} (usable {usable:#x})")]
    OutOfBounds { offset: u64, len: u64, usable: u64 },

    /// Collective arguments differ across PEs (safe mode).
    #[error("symmetric argument mismatch: {0}")]
    ArgMismatch(String),

    /// Static registration attempted after the heap left its init epoch,
    /// or a duplicate label.
    #[error("static registration rejected: {0}")]
    StaticRegistration(String),

    /// Unknown static label.
    #[error("no static object registered under label {0:?}")]
    StaticUnknown(String),

    /// Two PEs entered different collectives, or with different sizes.
    #[error("collective mismatch on rank {rank}: {what}")]
    CollectiveMismatch { rank: u32, what: String },

    /// A peer detected a mismatch and poisoned the job's collectives.
    #[error("collective poisoned by rank {rank}")]
    CollectivePoisoned { rank: u32 },

    /// Temporary staging request outside a collective, or staging exhausted.
    #[error("staging allocation failed: {0}")]
    Staging(String),

    /// Lock acquired twice by the same PE without release.
    #[error("lock {key:?} already held by this PE")]
    LockReentry { key: String },

    /// Lock released by a PE that does not hold it.
    #[error("lock {key:?} not held by this PE")]
    LockNotHeld { key: String },

    /// World used before init, after finalize, or init called twice.
    #[error("runtime state error: {0}")]
    State(String),

    /// Launcher-level failure (spawn, wait, relay).
    #[error("launch failed: {0}")]
    Launch(String),

    /// A debug-mode watchdog fired while waiting for a peer.
    #[error("watchdog expired after {waited_ms} ms: {what}")]
    Watchdog { waited_ms: u64, what: String },
}

impl PoshError {
    /// Wraps the current `errno` for a named syscall.
    pub(crate) fn os(call: &'static str) -> Self {
        PoshError::Os { call, errno: std::io::Error::last_os_error() }
    }
}
