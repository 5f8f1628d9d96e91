//! In-segment layout: header, staging area, data region.
//!
//! A segment is carved as `[ header | staging | data ]`. The header holds
//! everything peers coordinate through (identity, barrier cells, the
//! collective progress descriptor, the lock table, allocator roots); the
//! staging area serves temporary in-collective allocations; the data region
//! is the symmetric heap proper. All cross-process fields are atomics so
//! concurrent access stays defined; layout is `repr(C)` and guarded by an
//! ABI tag checked at attach time.

use std::sync::atomic::{AtomicU32, AtomicU64};

use crate::error::PoshError;
use crate::Result;

/// Value published last (Release) by the segment owner once every other
/// header field is initialized. Attachers spin until they observe it.
pub(crate) const SEGMENT_MAGIC: u64 = 0x504F_5348_5345_474D; // "POSHSEGM"

/// Bump when any field in [`SegmentHeader`] moves.
const LAYOUT_VERSION: u16 = 1;

/// Sentinel for “no offset” in handle and buffer cells.
pub(crate) const NULL_OFF: u64 = u64::MAX;

/// Rounds in the dissemination barrier; bounds npes at 2^32 anyway, cells
/// sized generously so the array never needs to grow.
pub(crate) const BARRIER_CELLS: usize = 32;

/// Slots in the per-PE named-lock table.
pub(crate) const LOCK_SLOTS: usize = 128;

/// Early-arrival handle cells in the descriptor. Two suffice: a PE can be
/// pushed to before entry by at most its round-0 partner and one extra PE.
pub(crate) const DEPOSIT_CELLS: usize = 2;

/// Default symmetric-heap capacity when `POSH_HEAP_SIZE` is absent.
pub(crate) const DEFAULT_CAPACITY: u64 = 64 * 1024 * 1024;

/// Collective progress descriptor, one per segment.
///
/// `counter` counts remote accesses to this PE during the current
/// collective: payload/slot/result writes by peers, handle deposits, and
/// reads of this PE's buffers by peers consuming a handle this PE
/// deposited. Each PE derives the exact quota for its exit from the
/// algorithm shape, waits for it, resets the descriptor, then advances
/// `epoch` (Release) as the final step. Peers gate every remote access on
/// `epoch` matching the collective's index, which is what makes
/// back-to-back collectives safe without a separating barrier.
#[repr(C)]
pub(crate) struct Descriptor {
    /// CAS guard for init/adopt/deposit transitions (not held while copying).
    pub lock: AtomicU32,
    /// Operation shape: kind | reduce-op << 8 | element code << 16.
    pub ctype: AtomicU32,
    /// Nonzero while a collective is open on this PE.
    pub in_progress: AtomicU32,
    /// Set by the owner on entry; distinguishes remote initialization.
    pub owner_in: AtomicU32,
    /// Nonzero once any PE detects a shape mismatch (value: rank + 1).
    pub poison: AtomicU32,
    pub _pad: AtomicU32,
    /// Remote accesses to this PE in the current collective.
    pub counter: AtomicU64,
    /// Staging/gather offset for the current operation, or `NULL_OFF`.
    pub buf: AtomicU64,
    /// Payload bytes of the current operation (shape check in safe mode).
    pub size: AtomicU64,
    /// Completed broadcast/reduce collectives on this PE.
    pub epoch: AtomicU64,
    /// Early-arrival handles deposited by peers before this PE entered.
    pub deposits: [AtomicU64; DEPOSIT_CELLS],
    pub deposit_tags: [AtomicU32; DEPOSIT_CELLS],
}

/// Collective kinds stored in the low byte of `ctype`. Barriers do not
/// mark descriptors (their cells carry all the state), so kind 1 stays
/// reserved.
pub(crate) const CKIND_NONE: u32 = 0;
pub(crate) const CKIND_BROADCAST: u32 = 2;
pub(crate) const CKIND_REDUCE: u32 = 3;

/// Deposit tags.
pub(crate) const DEP_EMPTY: u32 = 0;
/// Payload from the broadcast parent or the round-0 reduce partner.
pub(crate) const DEP_PRIMARY: u32 = 1;
/// Pre-round contribution from an extra PE (non-power-of-two reduce).
pub(crate) const DEP_EXTRA: u32 = 2;

#[repr(C)]
pub(crate) struct SegmentHeader {
    /// `SEGMENT_MAGIC` once the owner finished initializing the header.
    pub magic: AtomicU64,
    /// Layout/word-size/endianness fingerprint; must match on attach.
    pub abi_tag: AtomicU64,
    pub rank: AtomicU32,
    pub npes: AtomicU32,
    /// Total segment bytes (header + staging + data); must match on attach.
    pub capacity: AtomicU64,
    pub owner_pid: AtomicU32,
    /// Owner spins here during init while a debugger attaches.
    pub debug_hold: AtomicU32,
    /// Completed barrier rounds on this PE.
    pub barrier_epoch: AtomicU64,
    /// Dissemination cells: peers stamp their epoch into round k's cell.
    pub barrier_cells: [AtomicU64; BARRIER_CELLS],
    /// Head offset of the allocator free list (`NULL_OFF` when empty).
    pub alloc_free_head: AtomicU64,
    /// Live allocation count (double-free diagnostics, state hashing).
    pub alloc_live: AtomicU64,
    /// Fingerprint of the current collective-allocation arguments, checked
    /// across PEs in safe mode before the allocator runs.
    pub alloc_arg_check: AtomicU64,
    /// Bump watermark of the staging area (owner resets on collective exit).
    pub staging_watermark: AtomicU64,
    pub desc: Descriptor,
    /// Named-lock cells: 0 free, else fingerprint<<32 | (rank+1)<<1 | 1.
    pub locks: [AtomicU64; LOCK_SLOTS],
}

/// Header bytes reserved at the front of every segment.
pub(crate) const HEADER_RESERVE: u64 = 4096;

const _: () = assert!(
    std::mem::size_of::<SegmentHeader>() <= HEADER_RESERVE as usize,
    "segment header outgrew its reserved space; bump HEADER_RESERVE and LAYOUT_VERSION"
);

/// Composite fingerprint of everything that must agree for two processes
/// to share these structs: layout version, pointer width, endianness, and
/// the compiled header size.
pub(crate) fn abi_tag() -> u64 {
    let endian: u64 = if cfg!(target_endian = "little") { 1 } else { 2 };
    (LAYOUT_VERSION as u64)
        | ((std::mem::size_of::<usize>() as u64) << 16)
        | (endian << 24)
        | ((std::mem::size_of::<SegmentHeader>() as u64) << 32)
}

/// Byte ranges of the three segment areas for a given capacity.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct Geometry {
    pub capacity: u64,
    pub staging_off: u64,
    pub staging_len: u64,
    pub data_off: u64,
}

/// Staging sizing: an eighth of the segment, clamped to [64 KiB, 1 MiB].
/// At the 64 MiB default capacity this is exactly 1 MiB.
const STAGING_MIN: u64 = 64 * 1024;
const STAGING_MAX: u64 = 1024 * 1024;

impl Geometry {
    pub(crate) fn for_capacity(capacity: u64) -> Result<Geometry> {
        let min_capacity = HEADER_RESERVE + 2 * STAGING_MIN;
        if capacity < min_capacity {
            return Err(PoshError::BadConfig(format!(
                "heap capacity {capacity} below minimum {min_capacity}"
            )));
        }
        if capacity % 4096 != 0 {
            return Err(PoshError::BadConfig(format!(
                "heap capacity {capacity} must be a multiple of 4096"
            )));
        }
        let staging_len = (capacity / 8).clamp(STAGING_MIN, STAGING_MAX);
        Ok(Geometry {
            capacity,
            staging_off: HEADER_RESERVE,
            staging_len,
            data_off: HEADER_RESERVE + staging_len,
        })
    }

    /// Bytes available to the symmetric allocator.
    pub(crate) fn usable(&self) -> u64 {
        self.capacity - self.data_off
    }
}

/// Borrows the header living at the front of a mapped segment.
///
/// # Safety
/// `base` must point at a live mapping of at least `HEADER_RESERVE` bytes
/// that was initialized as a segment header (or is being initialized by
/// this process). Aliasing is sound because every field is atomic.
pub(crate) unsafe fn header<'a>(base: *mut u8) -> &'a SegmentHeader {
    &*(base as *const SegmentHeader)
}

/// Packs a (rank, heap offset) pair into one nonzero handle word.
pub(crate) fn pack_handle(rank: u32, off: u64) -> u64 {
    debug_assert!(off < 1 << 40, "offset exceeds handle encoding");
    debug_assert!(rank < 1 << 23, "rank exceeds handle encoding");
    (1 << 63) | ((rank as u64) << 40) | off
}

pub(crate) fn unpack_handle(h: u64) -> (u32, u64) {
    debug_assert!(h >> 63 == 1, "not a packed handle");
    (((h >> 40) & 0x7F_FFFF) as u32, h & ((1 << 40) - 1))
}

/// Shape word for `ctype`: collective kind plus, for reductions, the
/// operator and element code. Any cross-PE disagreement is a mismatch.
pub(crate) fn ctype_word(kind: u32, op: u8, elem: u8) -> u32 {
    kind | ((op as u32) << 8) | ((elem as u32) << 16)
}

pub(crate) fn ctype_kind(word: u32) -> u32 {
    word & 0xFF
}

/// FNV-1a over bytes. Used wherever two processes must hash identically
/// (lock-slot mapping, allocator state digests, argument fingerprints);
/// the std hasher is randomly seeded per process and cannot serve here.
pub(crate) fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01B3);
    }
    h
}

/// Chains a word into an FNV-1a state (for streaming multi-field hashes).
pub(crate) fn fnv1a64_word(state: u64, word: u64) -> u64 {
    let mut h = state;
    for &b in &word.to_le_bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01B3);
    }
    h
}

pub(crate) const FNV_SEED: u64 = 0xcbf2_9ce4_8422_2325;

/// Segment name for a PE: `/<base>-<jobid>-<rank>`.
pub(crate) fn segment_name(jobid: &str, rank: u32) -> String {
    format!("/posh-{jobid}-{rank}")
}

/// jobids embed into shm names, so keep them filesystem-safe.
pub(crate) fn validate_jobid(jobid: &str) -> Result<()> {
    if jobid.is_empty() || jobid.len() > 64 {
        return Err(PoshError::BadConfig(format!("jobid {jobid:?} must be 1..=64 chars")));
    }
    if !jobid.bytes().all(|b| b.is_ascii_alphanumeric() || b == b'-' || b == b'_') {
        return Err(PoshError::BadConfig(format!(
            "jobid {jobid:?} may only contain [A-Za-z0-9_-]"
        )));
    }
    Ok(())
}
