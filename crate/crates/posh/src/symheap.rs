//! Symmetric heaps and the per-PE [`World`] handle.
//!
//! Each PE owns one named segment; at init it creates its own, then
//! attaches every peer's by constructing the peer's name from the shared
//! job id and the rank, retrying with backoff until the owner has
//! published its header. Allocation calls are collective and
//! deterministic, so one address arithmetic rule covers the whole job:
//! the object sits at the same heap offset everywhere, and a remote
//! address is `remote_base + offset`. Offsets travel as [`SymAddr`];
//! raw pointers never cross process boundaries.

use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Mutex;
use std::time::{Duration, Instant};

use crate::alloc::{Allocator, ALLOC_ALIGN};
use crate::collectives::{self, BcastAlgo, ReduceAlgo};
use crate::error::PoshError;
use crate::layout::{self, Geometry, SegmentHeader, DEFAULT_CAPACITY, SEGMENT_MAGIC};
use crate::shm::{self, ShmSegment};
use crate::Result;

/// Environment contract between the launcher and PEs.
pub const ENV_RANK: &str = "POSH_RANK";
pub const ENV_NPES: &str = "POSH_NPES";
pub const ENV_JOBID: &str = "POSH_JOBID";
pub const ENV_HEAP_SIZE: &str = "POSH_HEAP_SIZE";
pub const ENV_DEBUG: &str = "POSH_DEBUG";
pub const ENV_SAFE: &str = "POSH_SAFE";
pub const ENV_DEBUG_HOLD_RANK: &str = "POSH_DEBUG_HOLD_RANK";
pub const ENV_COLL_ALGO: &str = "POSH_COLL_ALGO";
/// Attach retry budget override in milliseconds (default 10 000).
pub const ENV_ATTACH_TIMEOUT_MS: &str = "POSH_ATTACH_TIMEOUT_MS";

/// Heap-relative byte offset of a symmetric object. Offset 0 is the first
/// usable heap byte; the segment header can never be addressed through one.
/// Because allocation is deterministic and collective, the same `SymAddr`
/// names the same object on every PE.
#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Debug)]
pub struct SymAddr(pub(crate) u64);

impl SymAddr {
    /// Heap-relative byte offset.
    pub fn offset(self) -> u64 {
        self.0
    }

    /// Address at a raw heap offset. Symmetric addresses are plain
    /// offsets, so they can be reconstructed after serialization.
    pub fn from_offset(offset: u64) -> SymAddr {
        SymAddr(offset)
    }

    /// Byte displacement within an allocation (element indexing).
    pub fn add(self, bytes: u64) -> SymAddr {
        SymAddr(self.0 + bytes)
    }
}

/// Everything [`World::init_with`] needs; [`InitConfig::from_env`] fills it
/// from the launcher-provided environment.
#[derive(Clone, Debug)]
pub struct InitConfig {
    pub rank: u32,
    pub npes: u32,
    pub jobid: String,
    /// Total segment bytes per PE (header + staging + heap).
    pub capacity: u64,
    /// Runtime argument/bounds checking (also needs the `safe` feature).
    pub safe: bool,
    /// Extra diagnostics.
    pub debug: bool,
    /// Rank that pauses during init until released (debugger attach).
    pub debug_hold_rank: Option<u32>,
    /// Collective algorithm selection string (see `POSH_COLL_ALGO`).
    pub coll_algo: Option<String>,
    pub attach_timeout: Duration,
}

impl InitConfig {
    /// Reads the job environment. `POSH_RANK`, `POSH_NPES`, and
    /// `POSH_JOBID` are required; the rest have defaults.
    pub fn from_env() -> Result<Self> {
        fn req(name: &str) -> Result<String> {
            std::env::var(name).map_err(|_| PoshError::BadEnv(format!("{name} is not set")))
        }
        fn parse<T: std::str::FromStr>(name: &str, v: String) -> Result<T> {
            v.parse().map_err(|_| PoshError::BadEnv(format!("{name}={v:?} is not valid")))
        }
        let rank: u32 = parse(ENV_RANK, req(ENV_RANK)?)?;
        let npes: u32 = parse(ENV_NPES, req(ENV_NPES)?)?;
        let jobid = req(ENV_JOBID)?;
        let capacity = match std::env::var(ENV_HEAP_SIZE) {
            Ok(v) => parse(ENV_HEAP_SIZE, v)?,
            Err(_) => DEFAULT_CAPACITY,
        };
        let safe = std::env::var(ENV_SAFE).map(|v| v != "0").unwrap_or(true);
        let debug = std::env::var(ENV_DEBUG).map(|v| v == "1").unwrap_or(false);
        let debug_hold_rank = match std::env::var(ENV_DEBUG_HOLD_RANK) {
            Ok(v) => Some(parse(ENV_DEBUG_HOLD_RANK, v)?),
            Err(_) => None,
        };
        let coll_algo = std::env::var(ENV_COLL_ALGO).ok();
        let attach_timeout = Duration::from_millis(match std::env::var(ENV_ATTACH_TIMEOUT_MS) {
            Ok(v) => parse(ENV_ATTACH_TIMEOUT_MS, v)?,
            Err(_) => 10_000,
        });
        Ok(InitConfig {
            rank,
            npes,
            jobid,
            capacity,
            safe,
            debug,
            debug_hold_rank,
            coll_algo,
            attach_timeout,
        })
    }

    /// Convenience for single-process use and tests.
    pub fn standalone(rank: u32, npes: u32, jobid: &str, capacity: u64) -> Self {
        InitConfig {
            rank,
            npes,
            jobid: jobid.to_string(),
            capacity,
            safe: true,
            debug: false,
            debug_hold_rank: None,
            coll_algo: None,
            attach_timeout: Duration::from_millis(10_000),
        }
    }
}

struct StaticTable {
    /// Registration order matters: entries are freed in reverse at finalize.
    entries: Vec<(String, SymAddr, u64)>,
    /// Registration window: open from init until the first ordinary
    /// allocation call.
    open: bool,
}

/// A PE's runtime handle: its own heap, cached attachments to every peer
/// heap, and the collective/locking state built on them.
///
/// One `World` per process. Methods take `&self`; cross-process state is
/// atomic, and the transfer paths are safe to call from multiple threads
/// of one PE only on disjoint regions (collectives and allocation calls
/// must stay single-threaded per PE).
pub struct World {
    pub(crate) rank: u32,
    pub(crate) npes: u32,
    pub(crate) jobid: String,
    pub(crate) geo: Geometry,
    /// Rank-indexed segments; `segs[rank]` is this PE's own.
    pub(crate) segs: Vec<ShmSegment>,
    pub(crate) alloc: Allocator,
    pub(crate) safe: bool,
    pub(crate) debug: bool,
    pub(crate) bcast_algo: BcastAlgo,
    pub(crate) reduce_algo: ReduceAlgo,
    statics: Mutex<StaticTable>,
    finalized: AtomicBool,
}

// Raw bases make World neither Send nor Sync automatically. The mappings
// live for the World's lifetime, every shared header field is atomic, and
// data-region access is raw byte copies, so handing references across
// threads of the owning process is sound under the documented discipline.
unsafe impl Send for World {}
unsafe impl Sync for World {}

impl std::fmt::Debug for World {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("World")
            .field("rank", &self.rank)
            .field("npes", &self.npes)
            .field("jobid", &self.jobid)
            .field("capacity", &self.geo.capacity)
            .field("safe", &self.safe)
            .finish_non_exhaustive()
    }
}

/// One live World per process: symmetric heaps are per-process resources.
static WORLD_LIVE: AtomicBool = AtomicBool::new(false);

impl World {
    /// Initializes from the launcher-provided environment.
    pub fn init() -> Result<World> {
        World::init_with(InitConfig::from_env()?)
    }

    /// Initializes from an explicit configuration: creates this PE's
    /// segment, waits for every peer segment, verifies compatibility, and
    /// joins the first barrier. On error the own segment is unlinked.
    pub fn init_with(cfg: InitConfig) -> Result<World> {
        if cfg.npes == 0 || cfg.rank >= cfg.npes {
            return Err(PoshError::BadConfig(format!(
                "rank {} outside 0..{}",
                cfg.rank, cfg.npes
            )));
        }
        layout::validate_jobid(&cfg.jobid)?;
        let geo = Geometry::for_capacity(cfg.capacity)?;
        let (bcast_algo, reduce_algo) =
            collectives::resolve_algorithms(cfg.coll_algo.as_deref(), true)?;

        if WORLD_LIVE.swap(true, Ordering::AcqRel) {
            return Err(PoshError::State(
                "a World is already live in this process".into(),
            ));
        }
        match Self::init_inner(cfg, geo, bcast_algo, reduce_algo) {
            Ok(w) => Ok(w),
            Err(e) => {
                WORLD_LIVE.store(false, Ordering::Release);
                Err(e)
            }
        }
    }

    fn init_inner(
        cfg: InitConfig,
        geo: Geometry,
        bcast_algo: BcastAlgo,
        reduce_algo: ReduceAlgo,
    ) -> Result<World> {
        let own_name = layout::segment_name(&cfg.jobid, cfg.rank);
        let own = Self::create_own_segment(&own_name, &geo)?;

        // Publish identity, then magic last: peers spin on magic and may
        // only trust the other fields after seeing it.
        let alloc = unsafe { Allocator::new(own.base(), geo.data_off, geo.capacity) };
        {
            let h = unsafe { layout::header(own.base()) };
            h.abi_tag.store(layout::abi_tag(), Ordering::Relaxed);
            h.rank.store(cfg.rank, Ordering::Relaxed);
            h.npes.store(cfg.npes, Ordering::Relaxed);
            h.capacity.store(geo.capacity, Ordering::Relaxed);
            h.owner_pid.store(std::process::id(), Ordering::Relaxed);
            h.desc.buf.store(layout::NULL_OFF, Ordering::Relaxed);
            alloc.init();
            h.magic.store(SEGMENT_MAGIC, Ordering::Release);
        }

        if cfg.debug_hold_rank == Some(cfg.rank) {
            let h = unsafe { layout::header(own.base()) };
            h.debug_hold.store(1, Ordering::Release);
            eprintln!(
                "posh: rank {} (pid {}) holding at init for debugger attach; \
                 clear with release_debug_hold(\"{}\", {})",
                cfg.rank,
                std::process::id(),
                cfg.jobid,
                cfg.rank
            );
            while h.debug_hold.load(Ordering::Acquire) != 0 {
                std::thread::sleep(Duration::from_millis(10));
            }
        }

        let mut segs: Vec<Option<ShmSegment>> = (0..cfg.npes).map(|_| None).collect();
        for r in 0..cfg.npes {
            if r == cfg.rank {
                continue;
            }
            match Self::attach_peer(&cfg, &geo, r) {
                Ok(seg) => segs[r as usize] = Some(seg),
                Err(e) => {
                    own.unlink();
                    return Err(e);
                }
            }
        }
        segs[cfg.rank as usize] = Some(own);
        let segs: Vec<ShmSegment> = segs.into_iter().map(|s| s.unwrap()).collect();

        let world = World {
            rank: cfg.rank,
            npes: cfg.npes,
            jobid: cfg.jobid,
            geo,
            segs,
            alloc,
            safe: cfg!(feature = "safe") && cfg.safe,
            debug: cfg.debug,
            bcast_algo,
            reduce_algo,
            statics: Mutex::new(StaticTable { entries: Vec::new(), open: true }),
            finalized: AtomicBool::new(false),
        };
        crate::datamover::resolve_active_copy();
        // First barrier: every PE has attached everyone, so symmetric
        // communication is legal from here on.
        if let Err(e) = world.barrier_all() {
            world.segs[world.rank as usize].unlink();
            return Err(e);
        }
        if world.debug {
            eprintln!(
                "posh: rank {} of {} up (job {}, {} heap bytes, bcast={}, reduce={})",
                world.rank,
                world.npes,
                world.jobid,
                world.usable_bytes(),
                world.bcast_algo.name(),
                world.reduce_algo.name(),
            );
        }
        Ok(world)
    }

    /// Creates the PE's own segment, reclaiming a leftover of the same
    /// name if its recorded owner is dead (stale from a killed job).
    fn create_own_segment(name: &str, geo: &Geometry) -> Result<ShmSegment> {
        for _ in 0..8 {
            match ShmSegment::create(name, geo.capacity as usize) {
                Ok(seg) => return Ok(seg),
                Err(e) if shm::is_errno(&e, libc::EEXIST) => {
                    let old = match ShmSegment::open(name) {
                        Ok(s) => s,
                        // Raced with someone unlinking it: try again.
                        Err(oe) if shm::is_errno(&oe, libc::ENOENT) => continue,
                        Err(oe) => return Err(oe),
                    };
                    let pid = if old.len() >= layout::HEADER_RESERVE as usize {
                        unsafe { layout::header(old.base()) }
                            .owner_pid
                            .load(Ordering::Relaxed) as i32
                    } else {
                        0
                    };
                    if shm::pid_alive(pid) {
                        return Err(PoshError::NameCollision { name: name.to_string(), pid });
                    }
                    drop(old);
                    shm::unlink_name(name);
                }
                Err(e) => return Err(e),
            }
        }
        Err(PoshError::State(format!("could not claim segment {name}")))
    }

    /// Attaches rank `r`: retry open with exponential backoff (1 ms
    /// doubling to 100 ms) until the deadline, then wait for the owner's
    /// magic and verify the header matches this job.
    fn attach_peer(cfg: &InitConfig, geo: &Geometry, r: u32) -> Result<ShmSegment> {
        let name = layout::segment_name(&cfg.jobid, r);
        let deadline = Instant::now() + cfg.attach_timeout;
        let mut delay = Duration::from_millis(1);
        let seg = loop {
            match ShmSegment::open(&name) {
                Ok(seg) => break seg,
                Err(e) if shm::is_errno(&e, libc::ENOENT) => {
                    if Instant::now() >= deadline {
                        return Err(PoshError::AttachTimeout { rank: r, name });
                    }
                    std::thread::sleep(delay.min(deadline.saturating_duration_since(Instant::now())));
                    delay = (delay * 2).min(Duration::from_millis(100));
                }
                Err(e) => return Err(e),
            }
        };
        if seg.len() != geo.capacity as usize {
            return Err(PoshError::HeapMismatch {
                rank: r,
                what: format!("segment size {} != capacity {}", seg.len(), geo.capacity),
            });
        }
        let h = unsafe { layout::header(seg.base()) };
        while h.magic.load(Ordering::Acquire) != SEGMENT_MAGIC {
            if Instant::now() >= deadline {
                return Err(PoshError::AttachTimeout { rank: r, name });
            }
            std::thread::sleep(Duration::from_millis(1));
        }
        let mismatch = |what: String| PoshError::HeapMismatch { rank: r, what };
        if h.abi_tag.load(Ordering::Relaxed) != layout::abi_tag() {
            return Err(mismatch("incompatible segment layout (abi tag)".into()));
        }
        if h.rank.load(Ordering::Relaxed) != r {
            return Err(mismatch(format!(
                "segment claims rank {}",
                h.rank.load(Ordering::Relaxed)
            )));
        }
        if h.npes.load(Ordering::Relaxed) != cfg.npes {
            return Err(mismatch(format!(
                "npes {} != {}",
                h.npes.load(Ordering::Relaxed),
                cfg.npes
            )));
        }
        if h.capacity.load(Ordering::Relaxed) != geo.capacity {
            return Err(mismatch(format!(
                "heap capacity {} != {}; capacities must be identical",
                h.capacity.load(Ordering::Relaxed),
                geo.capacity
            )));
        }
        Ok(seg)
    }

    pub fn rank(&self) -> u32 {
        self.rank
    }

    pub fn npes(&self) -> u32 {
        self.npes
    }

    pub fn jobid(&self) -> &str {
        &self.jobid
    }

    /// Bytes the symmetric allocator manages.
    pub fn usable_bytes(&self) -> u64 {
        self.geo.usable()
    }

    /// Whether verbose runtime logging is on (`POSH_DEBUG=1`).
    pub fn debug_enabled(&self) -> bool {
        self.debug
    }

    /// Largest allocation the local heap can currently satisfy. The same
    /// value on every PE whenever the job's allocation calls are aligned.
    pub fn largest_free_block(&self) -> u64 {
        self.alloc.largest_free()
    }

    /// Bytes reserved in front of the heap (header plus staging area).
    pub fn reserved_bytes(&self) -> u64 {
        self.geo.data_off
    }

    pub fn capacity(&self) -> u64 {
        self.geo.capacity
    }

    pub(crate) fn seg_base(&self, pe: u32) -> *mut u8 {
        self.segs[pe as usize].base()
    }

    pub(crate) fn peer_header(&self, pe: u32) -> &SegmentHeader {
        unsafe { layout::header(self.seg_base(pe)) }
    }

    pub(crate) fn own_header(&self) -> &SegmentHeader {
        self.peer_header(self.rank)
    }

    pub(crate) fn check_pe(&self, pe: u32) -> Result<()> {
        if pe >= self.npes {
            return Err(PoshError::BadConfig(format!(
                "PE {pe} outside job of {} PEs",
                self.npes
            )));
        }
        Ok(())
    }

    /// Resolves a symmetric address on a target PE to a raw pointer in
    /// this process's mapping of that PE's heap.
    ///
    /// The pointer stays valid while the `World` lives. In safe mode the
    /// offset must lie inside the heap data region; the length of the
    /// intended access is checked by the transfer entry points.
    pub fn translate(&self, pe: u32, addr: SymAddr) -> Result<*mut u8> {
        self.check_pe(pe)?;
        if self.safe && addr.0 >= self.geo.usable() {
            return Err(PoshError::OutOfBounds {
                offset: addr.0,
                len: 0,
                usable: self.geo.usable(),
            });
        }
        Ok(unsafe { self.seg_base(pe).add((self.geo.data_off + addr.0) as usize) })
    }

    /// Bounds check for an `len`-byte access at `addr` (safe mode).
    pub(crate) fn check_range(&self, addr: SymAddr, len: u64) -> Result<()> {
        if self.safe {
            let usable = self.geo.usable();
            if addr.0 >= usable || len > usable - addr.0 {
                return Err(PoshError::OutOfBounds { offset: addr.0, len, usable });
            }
        }
        Ok(())
    }

    /// Raw pointer to a segment-relative offset (internal paths that also
    /// address the staging area).
    pub(crate) fn seg_ptr(&self, pe: u32, seg_off: u64) -> *mut u8 {
        debug_assert!(seg_off < self.geo.capacity);
        unsafe { self.seg_base(pe).add(seg_off as usize) }
    }

    pub(crate) fn sym_to_seg(&self, addr: SymAddr) -> u64 {
        self.geo.data_off + addr.0
    }

    /// Collective allocation with default (16-byte) alignment.
    pub fn shmalloc(&self, bytes: u64) -> Result<SymAddr> {
        self.shmemalign(ALLOC_ALIGN, bytes)
    }

    /// Collective aligned allocation. Every PE must call with identical
    /// arguments in the same order; the call closes with a barrier so the
    /// object is usable remotely on return.
    pub fn shmemalign(&self, align: u64, bytes: u64) -> Result<SymAddr> {
        self.check_live()?;
        self.statics.lock().unwrap().open = false;
        self.collective_alloc_call(1, bytes, align)
    }

    /// Collective free. Same discipline as allocation: identical argument
    /// on every PE, barrier-terminated.
    pub fn shfree(&self, addr: SymAddr) -> Result<()> {
        self.check_live()?;
        self.statics.lock().unwrap().open = false;
        self.collective_alloc_call(2, addr.0, 0).map(|_| ())
    }

    /// Shared body of the collective allocator calls. `op`: 1 allocate,
    /// 2 free. In safe mode the PEs first exchange an argument
    /// fingerprint through their headers and verify agreement, catching
    /// diverged call sequences before they desymmetrize the heaps.
    fn collective_alloc_call(&self, op: u8, a: u64, b: u64) -> Result<SymAddr> {
        if self.safe && self.npes > 1 {
            let mut fp = layout::fnv1a64_word(layout::FNV_SEED, op as u64);
            fp = layout::fnv1a64_word(fp, a);
            fp = layout::fnv1a64_word(fp, b);
            self.own_header().alloc_arg_check.store(fp, Ordering::Release);
            self.barrier_all()?;
            for r in 0..self.npes {
                let theirs = self.peer_header(r).alloc_arg_check.load(Ordering::Acquire);
                if theirs != fp {
                    return Err(PoshError::ArgMismatch(format!(
                        "rank {} disagrees on collective allocation arguments \
                         (op {op}, args {a}/{b})",
                        r
                    )));
                }
            }
            // Keep slow PEs from observing a reused fingerprint cell.
            self.barrier_all()?;
        }
        let out = match op {
            1 => self.alloc.allocate(a, b).map(|seg_off| SymAddr(seg_off - self.geo.data_off)),
            _ => self
                .alloc
                .deallocate(self.geo.data_off + a)
                .map(|_| SymAddr(0)),
        };
        match out {
            Ok(addr) => {
                self.barrier_all()?;
                Ok(addr)
            }
            // Allocator state is identical on every PE, so the failure is
            // symmetric too; every PE returns the same error and no PE is
            // left waiting at the closing barrier.
            Err(e) => Err(e),
        }
    }

    /// Collective registration of a named symmetric object during the
    /// init epoch (before the first ordinary allocation). Replaces
    /// link-time symbol placement: every PE registers the same labels in
    /// the same order and receives the same address.
    pub fn register_static(&self, label: &str, bytes: u64) -> Result<SymAddr> {
        self.check_live()?;
        {
            let t = self.statics.lock().unwrap();
            if !t.open {
                return Err(PoshError::StaticRegistration(format!(
                    "init epoch is over (label {label:?})"
                )));
            }
            if t.entries.iter().any(|(l, _, _)| l == label) {
                return Err(PoshError::StaticRegistration(format!(
                    "label {label:?} already registered"
                )));
            }
        }
        let addr = self.collective_alloc_call(1, bytes, ALLOC_ALIGN)?;
        self.statics.lock().unwrap().entries.push((label.to_string(), addr, bytes));
        Ok(addr)
    }

    /// Address and size of a registered static object.
    pub fn lookup_static(&self, label: &str) -> Result<(SymAddr, u64)> {
        let t = self.statics.lock().unwrap();
        t.entries
            .iter()
            .find(|(l, _, _)| l == label)
            .map(|&(_, a, s)| (a, s))
            .ok_or_else(|| PoshError::StaticUnknown(label.to_string()))
    }

    /// Digest of a PE's allocator state (live count + free list). Equal
    /// across PEs after any quiescent point when call sequences matched;
    /// callers should only compare remote digests after a barrier.
    pub fn alloc_state_hash(&self, pe: u32) -> Result<u64> {
        self.check_pe(pe)?;
        let a = unsafe { Allocator::new(self.seg_base(pe), self.geo.data_off, self.geo.capacity) };
        Ok(a.state_hash())
    }

    /// Live allocation count on a PE.
    pub fn alloc_live(&self, pe: u32) -> Result<u64> {
        self.check_pe(pe)?;
        Ok(self.peer_header(pe).alloc_live.load(Ordering::Relaxed))
    }

    /// Current staging-area bump watermark on a PE (0 outside collectives).
    pub fn staging_watermark(&self, pe: u32) -> Result<u64> {
        self.check_pe(pe)?;
        Ok(self.peer_header(pe).staging_watermark.load(Ordering::Relaxed))
    }

    pub(crate) fn check_live(&self) -> Result<()> {
        if self.finalized.load(Ordering::Acquire) {
            return Err(PoshError::State("World is finalized".into()));
        }
        Ok(())
    }

    /// Collective teardown: frees statics, joins a final barrier, and
    /// unlinks this PE's segment. Idempotent. If the job's collectives
    /// were poisoned by a detected mismatch, the synchronizing steps are
    /// skipped and only local cleanup runs.
    pub fn finalize(&self) -> Result<()> {
        if self.finalized.swap(true, Ordering::AcqRel) {
            return Ok(());
        }
        let poisoned = self.own_header().desc.poison.load(Ordering::Acquire) != 0;
        let mut first_err = None;
        if !poisoned {
            let entries: Vec<(String, SymAddr, u64)> = {
                let mut t = self.statics.lock().unwrap();
                t.open = false;
                t.entries.drain(..).collect()
            };
            for (_, addr, _) in entries.iter().rev() {
                if let Err(e) = self.alloc.deallocate(self.geo.data_off + addr.0) {
                    first_err.get_or_insert(e);
                }
            }
            // Unlink the name before the rendezvous: once any rank
            // returns, no stale names remain for a re-init to attach.
            // Live mappings keep the barrier cells reachable.
            self.segs[self.rank as usize].unlink();
            if let Err(e) = self.barrier_inner() {
                first_err.get_or_insert(e);
            }
        } else {
            self.segs[self.rank as usize].unlink();
        }
        WORLD_LIVE.store(false, Ordering::Release);
        match first_err {
            Some(e) => Err(e),
            None => Ok(()),
        }
    }
}

impl Drop for World {
    fn drop(&mut self) {
        // Best effort only: no barrier here (a peer may be gone).
        if !self.finalized.swap(true, Ordering::AcqRel) {
            self.segs[self.rank as usize].unlink();
            WORLD_LIVE.store(false, Ordering::Release);
        }
    }
}

/// Clears a held rank's init pause from outside the job (companion to
/// `POSH_DEBUG_HOLD_RANK`). Opens the rank's segment by name and resets
/// the hold flag once the owner has published its header.
pub fn release_debug_hold(jobid: &str, rank: u32) -> Result<()> {
    layout::validate_jobid(jobid)?;
    let name = layout::segment_name(jobid, rank);
    let deadline = Instant::now() + Duration::from_millis(10_000);
    let seg = loop {
        match ShmSegment::open(&name) {
            Ok(s) => break s,
            Err(e) if shm::is_errno(&e, libc::ENOENT) && Instant::now() < deadline => {
                std::thread::sleep(Duration::from_millis(5));
            }
            Err(e) => return Err(e),
        }
    };
    let h = unsafe { layout::header(seg.base()) };
    while h.magic.load(Ordering::Acquire) != SEGMENT_MAGIC {
        if Instant::now() >= deadline {
            return Err(PoshError::AttachTimeout { rank, name });
        }
        std::thread::sleep(Duration::from_millis(1));
    }
    h.debug_hold.store(0, Ordering::Release);
    Ok(())
}

/// Lists leftover segment names of a job still present in the shm
/// namespace (teardown verification and launcher sweeps).
pub fn leftover_segments(jobid: &str, npes: u32) -> Vec<String> {
    (0..npes)
        .map(|r| layout::segment_name(jobid, r))
        .filter(|n| shm::name_exists(n))
        .collect()
}


#[cfg(test)]
mod tests {
    use super::test_support::*;
    use super::*;

    fn solo(tag: &str, capacity: u64) -> World {
        World::init_with(InitConfig::standalone(0, 1, &unique_jobid(tag), capacity)).unwrap()
    }

    #[test]
    fn single_pe_world_lifecycle() {
        let _g = WORLD_GATE.lock().unwrap();
        let w = solo("life", 1024 * 1024);
        assert_eq!(w.rank(), 0);
        assert_eq!(w.npes(), 1);
        assert_eq!(w.usable_bytes(), w.capacity() - w.reserved_bytes());
        assert!(w.usable_bytes() > 512 * 1024);
        w.finalize().unwrap();
    }

    #[test]
    fn double_init_rejected_and_guard_released() {
        let _g = WORLD_GATE.lock().unwrap();
        let w = solo("guard", 1024 * 1024);
        let err = World::init_with(InitConfig::standalone(0, 1, &unique_jobid("guard2"), 1024 * 1024))
            .unwrap_err();
        assert!(matches!(err, PoshError::State(_)));
        w.finalize().unwrap();
        let w2 = solo("guard3", 1024 * 1024);
        w2.finalize().unwrap();
    }

    #[test]
    fn allocation_translate_round_trip() {
        let _g = WORLD_GATE.lock().unwrap();
        let w = solo("alloc", 1024 * 1024);
        let a = w.shmalloc(256).unwrap();
        let b = w.shmalloc(256).unwrap();
        assert_ne!(a, b);
        let pa = w.translate(0, a).unwrap();
        unsafe {
            pa.write_bytes(0x5A, 256);
            assert_eq!(pa.add(255).read(), 0x5A);
        }
        w.shfree(a).unwrap();
        w.shfree(b).unwrap();
        let again = w.shmalloc(256).unwrap();
        assert_eq!(again, a, "deterministic allocator must reuse the first hole");
        w.finalize().unwrap();
    }

    #[test]
    fn alignment_and_invalid_arguments() {
        let _g = WORLD_GATE.lock().unwrap();
        let w = solo("align", 1024 * 1024);
        let a = w.shmemalign(4096, 64).unwrap();
        assert_eq!(w.sym_to_seg(a) % 4096, 0, "alignment is a segment-offset property");
        assert!(matches!(w.shmemalign(3, 8), Err(PoshError::BadAlignment(_))));
        assert!(matches!(w.shmalloc(0), Err(PoshError::InvalidSize(_))));
        w.shfree(a).unwrap();
        w.finalize().unwrap();
    }

    #[test]
    fn statics_registered_only_during_init_epoch() {
        let _g = WORLD_GATE.lock().unwrap();
        let w = solo("statics", 1024 * 1024);
        let s1 = w.register_static("counter", 8).unwrap();
        let dup = w.register_static("counter", 8);
        assert!(matches!(dup, Err(PoshError::StaticRegistration(_))));
        let (found, size) = w.lookup_static("counter").unwrap();
        assert_eq!(found, s1);
        assert_eq!(size, 8);
        assert!(matches!(w.lookup_static("nope"), Err(PoshError::StaticUnknown(_))));
        let _x = w.shmalloc(16).unwrap();
        let late = w.register_static("late", 8);
        assert!(matches!(late, Err(PoshError::StaticRegistration(_))));
        w.finalize().unwrap();
    }

    #[test]
    fn translate_bounds_checked_in_safe_mode() {
        let _g = WORLD_GATE.lock().unwrap();
        let w = solo("bounds", 1024 * 1024);
        let usable = w.usable_bytes();
        assert!(w.translate(0, SymAddr(usable)).is_err());
        assert!(w.translate(0, SymAddr(usable - 1)).is_ok());
        assert!(w.translate(3, SymAddr(0)).is_err(), "PE out of range");
        w.finalize().unwrap();
    }

    #[test]
    fn finalize_unlinks_segment() {
        let _g = WORLD_GATE.lock().unwrap();
        let jobid = unique_jobid("cleanup");
        let w = World::init_with(InitConfig::standalone(0, 1, &jobid, 1024 * 1024)).unwrap();
        assert_eq!(leftover_segments(&jobid, 1).len(), 1);
        w.finalize().unwrap();
        assert!(leftover_segments(&jobid, 1).is_empty(), "segment must be unlinked");
    }

    #[test]
    fn stale_segment_reclaimed() {
        let _g = WORLD_GATE.lock().unwrap();
        let jobid = unique_jobid("stale");
        // Fake a dead owner's leftover: create the name with a header
        // claiming an impossible pid.
        let name = layout::segment_name(&jobid, 0);
        {
            let seg = ShmSegment::create(&name, 1024 * 1024).unwrap();
            let h = unsafe { layout::header(seg.base()) };
            h.owner_pid.store(0, Ordering::Relaxed);
            h.magic.store(SEGMENT_MAGIC, Ordering::Release);
        }
        assert!(shm::name_exists(&name));
        let w = World::init_with(InitConfig::standalone(0, 1, &jobid, 1024 * 1024)).unwrap();
        assert_eq!(w.rank(), 0);
        w.finalize().unwrap();
    }

    #[test]
    fn attach_times_out_without_peer() {
        let _g = WORLD_GATE.lock().unwrap();
        let jobid = unique_jobid("lonely");
        let mut cfg = InitConfig::standalone(0, 2, &jobid, 1024 * 1024);
        cfg.attach_timeout = Duration::from_millis(200);
        let started = Instant::now();
        let err = World::init_with(cfg).unwrap_err();
        assert!(matches!(err, PoshError::AttachTimeout { rank: 1, .. }), "got {err}");
        assert!(started.elapsed() < Duration::from_secs(5));
        // Own segment must not leak after failed init.
        assert!(!shm::name_exists(&layout::segment_name(&jobid, 0)));
    }
}
