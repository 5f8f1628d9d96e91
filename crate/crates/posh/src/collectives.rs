//! Collectives over per-PE progress descriptors.
//!
//! Every segment carries one descriptor. A PE entering a collective marks
//! its own; a PE that must touch a peer's memory first gates on the peer's
//! descriptor `epoch` matching the collective's index, then either writes
//! payload directly (peer already entered, so its buffers exist) or
//! deposits a handle to its own source buffer for the peer to consume on
//! entry. The descriptor `counter` tallies every remote access to the PE;
//! each PE computes the exact tally its exit requires, waits for it,
//! resets the descriptor, and advances `epoch`. Any in-collective
//! temporary staging is reverted before its owner exits, so the heaps
//! stay symmetric across collectives.
//!
//! Progress never requires the target to run communication code: arrival
//! order is free, which the tests exercise with forced schedules.
//!
//! The barrier is a dissemination barrier with monotone epoch numbers
//! stamped into per-round cells (each cell has exactly one writer), so
//! back-to-back barriers never alias and cells need no reset.

use std::sync::atomic::AtomicU64;
use std::sync::atomic::Ordering::{AcqRel, Acquire, Relaxed, Release};

use crate::datamover::{active_copy_fn, ScalarElem};
use crate::error::PoshError;
use crate::layout::{
    ctype_kind, ctype_word, pack_handle, unpack_handle, Descriptor, CKIND_BROADCAST, CKIND_NONE,
    CKIND_REDUCE, DEPOSIT_CELLS, DEP_EMPTY, DEP_EXTRA, DEP_PRIMARY, NULL_OFF,
};
use crate::symheap::{SymAddr, World};
use crate::wait::Backoff;
use crate::Result;

/// Broadcast algorithm menu. `BinomialTree` is the default; `LinearPut`
/// is the simple root-pushes-to-all variant.
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum BcastAlgo {
    LinearPut,
    BinomialTree,
}

impl BcastAlgo {
    pub fn name(self) -> &'static str {
        match self {
            BcastAlgo::LinearPut => "linear-put",
            BcastAlgo::BinomialTree => "binomial-tree",
        }
    }
}

/// Reduction algorithm menu. `LinearGather` (default) gathers at PE 0 and
/// folds in rank order; `RecursiveDoubling` exchanges partial results in
/// log rounds (with pre/post hand-off for non-power-of-two jobs).
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum ReduceAlgo {
    LinearGather,
    RecursiveDoubling,
}

impl ReduceAlgo {
    pub fn name(self) -> &'static str {
        match self {
            ReduceAlgo::LinearGather => "linear-gather",
            ReduceAlgo::RecursiveDoubling => "recursive-doubling",
        }
    }
}

/// Parses `POSH_COLL_ALGO`: comma-separated `bcast=<name>` / `reduce=<name>`
/// entries, or bare algorithm names (each family's names are distinct).
/// Entries override the build-feature defaults; with neither an env entry
/// nor a feature, the defaults apply and a one-line warning is printed
/// (once per process) when `warn_default` is set.
pub(crate) fn resolve_algorithms(
    env: Option<&str>,
    warn_default: bool,
) -> Result<(BcastAlgo, ReduceAlgo)> {
    let mut bcast = if cfg!(feature = "bcast-linear") {
        Some(BcastAlgo::LinearPut)
    } else {
        None
    };
    let mut reduce = if cfg!(feature = "reduce-rd") {
        Some(ReduceAlgo::RecursiveDoubling)
    } else {
        None
    };
    if let Some(spec) = env {
        for raw in spec.split(',').map(str::trim).filter(|s| !s.is_empty()) {
            let (key, val) = match raw.split_once('=') {
                Some((k, v)) => (Some(k.trim()), v.trim()),
                None => (None, raw),
            };
            match (key, val) {
                (Some("bcast") | None, "linear-put") => bcast = Some(BcastAlgo::LinearPut),
                (Some("bcast") | None, "binomial-tree") => bcast = Some(BcastAlgo::BinomialTree),
                (Some("reduce") | None, "linear-gather") => reduce = Some(ReduceAlgo::LinearGather),
                (Some("reduce") | None, "recursive-doubling") => {
                    reduce = Some(ReduceAlgo::RecursiveDoubling)
                }
                _ => {
                    return Err(PoshError::BadConfig(format!(
                        "bad collective algorithm entry {raw:?} \
                         (bcast=linear-put|binomial-tree, reduce=linear-gather|recursive-doubling)"
                    )))
                }
            }
        }
    }
    if (bcast.is_none() || reduce.is_none()) && warn_default {
        static WARNED: std::sync::atomic::AtomicBool = std::sync::atomic::AtomicBool::new(false);
        if !WARNED.swap(true, Relaxed) {
            eprintln!(
                "posh: collective algorithms not selected, defaulting to \
                 bcast=binomial-tree, reduce=linear-gather"
            );
        }
    }
    Ok((
        bcast.unwrap_or(BcastAlgo::BinomialTree),
        reduce.unwrap_or(ReduceAlgo::LinearGather),
    ))
}

/// Canonical selection string (what the launcher exports to children).
pub(crate) fn algo_string(b: BcastAlgo, r: ReduceAlgo) -> String {
    format!("bcast={},reduce={}", b.name(), r.name())
}

/// Reduction operator.
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum ReduceOp {
    Sum,
    Min,
    Max,
}

impl ReduceOp {
    fn code(self) -> u8 {
        match self {
            ReduceOp::Sum => 1,
            ReduceOp::Min => 2,
            ReduceOp::Max => 3,
        }
    }
}

/// Element types reducible with [`World::reduce`]. The fold is the same
/// function everywhere, so a fixed fold order gives bit-identical results
/// on every PE.
pub trait ReduceElem: ScalarElem + reduce_private::Sealed {
    #[doc(hidden)]
    const ELEM_CODE: u8;
    #[doc(hidden)]
    fn fold(op: ReduceOp, a: Self, b: Self) -> Self;
}

mod reduce_private {
    pub trait Sealed {}
}

macro_rules! reduce_elem_int {
    ($t:ty, $code:expr) => {
        impl reduce_private::Sealed for $t {}
        impl ReduceElem for $t {
            const ELEM_CODE: u8 = $code;
            fn fold(op: ReduceOp, a: Self, b: Self) -> Self {
                match op {
                    ReduceOp::Sum => a.wrapping_add(b),
                    ReduceOp::Min => a.min(b),
                    ReduceOp::Max => a.max(b),
                }
            }
        }
    };
}

macro_rules! reduce_elem_float {
    ($t:ty, $code:expr) => {
        impl reduce_private::Sealed for $t {}
        impl ReduceElem for $t {
            const ELEM_CODE: u8 = $code;
            fn fold(op: ReduceOp, a: Self, b: Self) -> Self {
                match op {
                    ReduceOp::Sum => a + b,
                    ReduceOp::Min => a.min(b),
                    ReduceOp::Max => a.max(b),
                }
            }
        }
    };
}

reduce_elem_int!(i32, 1);
reduce_elem_int!(i64, 2);
reduce_elem_int!(u32, 3);
reduce_elem_int!(u64, 4);
reduce_elem_float!(f32, 5);
reduce_elem_float!(f64, 6);

/// Shape word: collective kind, operator, element, and (low 8 bits of)
/// the root. Descriptor-level agreement on this word plus the size is the
/// safe-mode cross-PE shape check.
fn shape_word(kind: u32, op: u8, elem: u8, root: u32) -> u32 {
    ctype_word(kind, op, elem) | ((root & 0xFF) << 24)
}

fn ceil_log2(n: u32) -> u32 {
    debug_assert!(n >= 2);
    u32::BITS - (n - 1).leading_zeros()
}

/// Binomial-tree children of a relative rank: `v + 2^k` for every
/// `2^k > v` still inside the job. Every nonzero relative rank appears as
/// exactly one node's child.
fn binomial_children(vrank: u32, npes: u32) -> Vec<u32> {
    let mut out = Vec::new();
    let mut k = if vrank == 0 {
        0
    } else {
        u32::BITS - vrank.leading_zeros()
    };
    while let Some(c) = vrank.checked_add(1 << k) {
        if c >= npes {
            break;
        }
        out.push(c);
        k += 1;
    }
    out
}

/// RAII guard for a descriptor's transition lock. Held only for
/// pointer-sized bookkeeping, never while copying payload.
struct DescLock<'a> {
    d: &'a Descriptor,
}

impl<'a> DescLock<'a> {
    fn acquire(d: &'a Descriptor) -> DescLock<'a> {
        let mut bo = Backoff::new();
        while d
            .lock
            .compare_exchange_weak(0, 1, Acquire, Relaxed)
            .is_err()
        {
            // Transitions are tiny; this cannot miss a deadline.
            let _ = bo.step("descriptor transition lock");
        }
        DescLock { d }
    }
}

impl Drop for DescLock<'_> {
    fn drop(&mut self) {
        self.d.lock.store(0, Release);
    }
}

/// What the owner found when it entered its collective.
struct OwnerEntry {
    /// Base of this PE's staging plan, `NULL_OFF` when none was needed.
    staging_off: u64,
    /// Early-arrival handles deposited by peers: (tag, rank, seg offset).
    handles: Vec<(u32, u32, u64)>,
}

/// What a peer sees in a target's descriptor before touching its memory.
struct RemoteView {
    /// Target's owner has entered: its buffers exist, write directly.
    entered: bool,
    /// Target's staging buffer offset (`NULL_OFF` if none).
    buf: u64,
}

/// Periodic checks run inside collective wait loops: job poison, and in
/// safe mode cross-PE shape agreement for the same collective index.
struct WaitPoll<'w> {
    w: &'w World,
    j: u64,
    shape: u32,
    nbytes: u64,
    barrier_suspect: u32,
}

impl<'w> WaitPoll<'w> {
    fn new(w: &'w World, j: u64, shape: u32, nbytes: u64) -> Self {
        WaitPoll { w, j, shape, nbytes, barrier_suspect: 0 }
    }

    fn poll(&mut self) -> Result<()> {
        self.w.check_poison()?;
        if !self.w.safe {
            return Ok(());
        }
        for r in 0..self.w.npes {
            if r == self.w.rank {
                continue;
            }
            let d = self.w.desc(r);
            // ctype/size describe collective j only while epoch == j and
            // owner_in == 1 frame the reads on both sides. The writers
            // publish all four fields with Release, so a snapshot that
            // mixes in a mid-exit zero or a round j+1 value always comes
            // with a visible owner_in drop or epoch bump by the re-check,
            // and a peer churning through rounds yields no verdict here
            // instead of a false mismatch.
            if d.epoch.load(Acquire) != self.j || d.owner_in.load(Acquire) != 1 {
                continue;
            }
            let sh = d.ctype.load(Acquire);
            let sz = d.size.load(Acquire);
            if d.owner_in.load(Acquire) != 1 || d.epoch.load(Acquire) != self.j {
                continue;
            }
            if !matches!(ctype_kind(sh), CKIND_BROADCAST | CKIND_REDUCE) {
                continue;
            }
            if sh != self.shape {
                return Err(self.w.poison_all(format!(
                    "rank {r} entered a different collective \
                     (shape {sh:#010x}, this PE {:#010x})",
                    self.shape
                )));
            }
            if sz != self.nbytes {
                return Err(self.w.poison_all(format!(
                    "rank {r} entered the collective with {sz} bytes, \
                     this PE with {}",
                    self.nbytes
                )));
            }
        }
        // Two-PE jobs: the peer advancing its barrier epoch past ours
        // while we wait in a payload collective means the programs
        // diverged (it owes this PE an access first). Demand the signal
        // twice so an in-flight counter update cannot race the verdict.
        if self.w.npes == 2 {
            let own = self.w.own_header();
            if own.barrier_cells[0].load(Acquire) > own.barrier_epoch.load(Relaxed) {
                self.barrier_suspect += 1;
                if self.barrier_suspect >= 3 {
                    return Err(self.w.poison_all(
                        "peer entered a barrier while this PE waits in a \
                         broadcast/reduce"
                            .into(),
                    ));
                }
            } else {
                self.barrier_suspect = 0;
            }
        }
        Ok(())
    }
}

impl World {
    pub(crate) fn desc(&self, pe: u32) -> &Descriptor {
        &self.peer_header(pe).desc
    }

    /// Marks every PE's descriptor poisoned and returns the mismatch
    /// error. Waiting peers observe the flag and fail instead of hanging.
    pub(crate) fn poison_all(&self, what: String) -> PoshError {
        for r in 0..self.npes {
            self.desc(r).poison.store(self.rank + 1, Release);
        }
        PoshError::CollectiveMismatch { rank: self.rank, what }
    }

    pub(crate) fn check_poison(&self) -> Result<()> {
        for r in 0..self.npes {
            let p = self.desc(r).poison.load(Acquire);
            if p != 0 {
                return Err(PoshError::CollectivePoisoned { rank: p - 1 });
            }
        }
        Ok(())
    }

    /// Barrier across all PEs of the job.
    ///
    /// Dissemination rounds: in round k this PE stamps its target epoch
    /// into cell k of rank `(rank + 2^k) % npes` and waits for its own
    /// cell k to reach that epoch. Monotone epochs make consecutive
    /// barriers overwrite-safe, and the stamp/wait edges give the usual
    /// guarantee that no PE exits before every PE has entered.
    pub fn barrier_all(&self) -> Result<()> {
        self.check_live()?;
        self.barrier_inner()
    }

    /// Barrier body without the liveness gate (finalize runs its last
    /// barrier after marking the world finalized).
    pub(crate) fn barrier_inner(&self) -> Result<()> {
        if self.npes == 1 {
            return Ok(());
        }
        let own = self.own_header();
        let epoch = own.barrier_epoch.load(Relaxed) + 1;
        let rounds = ceil_log2(self.npes);
        for k in 0..rounds {
            let peer = (self.rank + (1u32 << k)) % self.npes;
            self.peer_header(peer).barrier_cells[k as usize].store(epoch, Release);
            let cell = &own.barrier_cells[k as usize];
            let mut bo = Backoff::for_collective();
            let mut iters = 0u32;
            while cell.load(Acquire) < epoch {
                bo.step("barrier round signal")?;
                iters = iters.wrapping_add(1);
                if iters % 512 == 0 {
                    self.check_poison()?;
                }
            }
        }
        own.barrier_epoch.store(epoch, Release);
        Ok(())
    }

    /// Bump allocation in a PE's staging area (16-byte granules).
    pub(crate) fn staging_bump(&self, pe: u32, need: u64) -> Result<u64> {
        let need = (need + 15) & !15;
        let h = self.peer_header(pe);
        let mut cur = h.staging_watermark.load(Relaxed);
        loop {
            if cur + need > self.geo.staging_len {
                return Err(PoshError::Staging(format!(
                    "staging exhausted on PE {pe}: {cur} + {need} > {}",
                    self.geo.staging_len
                )));
            }
            match h
                .staging_watermark
                .compare_exchange_weak(cur, cur + need, AcqRel, Relaxed)
            {
                Ok(_) => return Ok(self.geo.staging_off + cur),
                Err(v) => cur = v,
            }
        }
    }

    /// Temporary allocation in a PE's staging area, legal only while that
    /// PE is inside a collective; the area vanishes when the owner exits
    /// (the watermark is reset), so callers must not hold offsets across
    /// the collective's end. Runtime-internal surface, exposed for
    /// algorithm extensions and tests.
    pub fn temp_alloc_in_collective(&self, target_pe: u32, bytes: u64) -> Result<u64> {
        self.check_live()?;
        self.check_pe(target_pe)?;
        if self.desc(target_pe).in_progress.load(Acquire) == 0 {
            return Err(PoshError::Staging(format!(
                "PE {target_pe} is not inside a collective"
            )));
        }
        self.staging_bump(target_pe, bytes)
    }

    /// Atomic view of a staging flag word.
    fn stage_flag(&self, pe: u32, seg_off: u64) -> &AtomicU64 {
        debug_assert!(seg_off % 8 == 0);
        unsafe { &*(self.seg_ptr(pe, seg_off) as *const AtomicU64) }
    }

    /// Owner-side entry into a broadcast/reduce: adopt or initialize the
    /// own descriptor, claim staging, and collect early-arrival handles.
    fn owner_enter(&self, shape: u32, nbytes: u64, staging_need: u64) -> Result<OwnerEntry> {
        let d = self.desc(self.rank);
        let g = DescLock::acquire(d);
        let p = d.poison.load(Acquire);
        if p != 0 {
            return Err(PoshError::CollectivePoisoned { rank: p - 1 });
        }
        if d.owner_in.load(Relaxed) == 1 {
            drop(g);
            return Err(self.poison_all("PE entered a collective while already in one".into()));
        }
        if d.in_progress.load(Relaxed) == 0 {
            // Release: WaitPoll snapshots ctype/size without the lock.
            d.ctype.store(shape, Release);
            d.size.store(nbytes, Release);
            d.in_progress.store(1, Relaxed);
        } else if self.safe
            && (d.ctype.load(Relaxed) != shape || d.size.load(Relaxed) != nbytes)
        {
            let found = (d.ctype.load(Relaxed), d.size.load(Relaxed));
            drop(g);
            return Err(self.poison_all(format!(
                "collective shape mismatch at entry: peers started \
                 {found:?}, this PE brings ({shape:#010x}, {nbytes})"
            )));
        }
        d.owner_in.store(1, Release);
        let staging_off = if staging_need > 0 {
            let cur = d.buf.load(Relaxed);
            if cur == NULL_OFF {
                let off = self.staging_bump(self.rank, staging_need)?;
                d.buf.store(off, Relaxed);
                off
            } else {
                cur
            }
        } else {
            NULL_OFF
        };
        let mut handles = Vec::new();
        for i in 0..DEPOSIT_CELLS {
            let tag = d.deposit_tags[i].load(Relaxed);
            if tag != DEP_EMPTY {
                let (r, off) = unpack_handle(d.deposits[i].load(Relaxed));
                handles.push((tag, r, off));
            }
        }
        Ok(OwnerEntry { staging_off, handles })
    }

    /// Peer-side admission to a target's descriptor for collective `j`:
    /// waits for the target to reach `j`, verifies shape agreement, and
    /// returns the view plus the held transition lock (deposits must
    /// happen under it).
    fn remote_begin<'a>(
        &'a self,
        t: u32,
        shape: u32,
        nbytes: u64,
        j: u64,
        staging_need: u64,
    ) -> Result<(RemoteView, DescLock<'a>)> {
        let d = self.desc(t);
        let mut bo = Backoff::for_collective();
        let mut iters = 0u32;
        loop {
            let e = d.epoch.load(Acquire);
            if e == j {
                break;
            }
            if e > j {
                return Err(self.poison_all(format!(
                    "collective sequence diverged: rank {t} already completed \
                     collective {j}"
                )));
            }
            bo.step("peer collective epoch")?;
            iters = iters.wrapping_add(1);
            if iters % 512 == 0 {
                self.check_poison()?;
            }
        }
        let g = DescLock::acquire(d);
        let p = d.poison.load(Acquire);
        if p != 0 {
            return Err(PoshError::CollectivePoisoned { rank: p - 1 });
        }
        if d.in_progress.load(Relaxed) == 0 {
            // Release: WaitPoll snapshots ctype/size without the lock.
            d.ctype.store(shape, Release);
            d.size.store(nbytes, Release);
            d.in_progress.store(1, Relaxed);
        } else if self.safe
            && (d.ctype.load(Relaxed) != shape || d.size.load(Relaxed) != nbytes)
        {
            let found = (d.ctype.load(Relaxed), d.size.load(Relaxed));
            drop(g);
            return Err(self.poison_all(format!(
                "collective shape mismatch at rank {t}: found {found:?}, \
                 this PE brings ({shape:#010x}, {nbytes})"
            )));
        }
        let buf = if staging_need > 0 && d.buf.load(Relaxed) == NULL_OFF {
            let off = self.staging_bump(t, staging_need)?;
            d.buf.store(off, Relaxed);
            off
        } else {
            d.buf.load(Relaxed)
        };
        let entered = d.owner_in.load(Relaxed) == 1;
        Ok((RemoteView { entered, buf }, g))
    }

    /// Deposits an early-arrival handle (caller holds the target's
    /// transition lock) and credits the target's access counter.
    fn deposit(&self, g: &DescLock<'_>, tag: u32, handle: u64) -> Result<()> {
        for i in 0..DEPOSIT_CELLS {
            if g.d.deposit_tags[i].load(Relaxed) == DEP_EMPTY {
                g.d.deposits[i].store(handle, Relaxed);
                g.d.deposit_tags[i].store(tag, Relaxed);
                g.d.counter.fetch_add(1, AcqRel);
                return Ok(());
            }
        }
        Err(PoshError::State(
            "descriptor deposit cells exhausted (algorithm invariant broken)".into(),
        ))
    }

    /// Waits until this PE's access tally reaches `quota`, then resets the
    /// descriptor and staging and publishes the next collective epoch.
    fn owner_exit(&self, quota: u64, j: u64, poll: &mut WaitPoll<'_>) -> Result<()> {
        let d = self.desc(self.rank);
        let mut bo = Backoff::for_collective();
        let mut iters = 0u32;
        loop {
            let c = d.counter.load(Acquire);
            if c == quota {
                break;
            }
            if c > quota {
                return Err(self.poison_all(format!(
                    "unexpected remote access (counter {c} > quota {quota})"
                )));
            }
            bo.step("collective exit quota")?;
            iters = iters.wrapping_add(1);
            if iters >= 256 && iters % 128 == 0 {
                poll.poll()?;
            }
        }
        // Quota reached: nobody else touches this descriptor for index j,
        // and index j+1 peers are gated on the epoch bump below. The
        // Release stores (owner_in before size) let WaitPoll detect a
        // half-zeroed snapshot by its owner_in re-read.
        d.ctype.store(CKIND_NONE, Release);
        d.in_progress.store(0, Relaxed);
        d.owner_in.store(0, Release);
        d.counter.store(0, Relaxed);
        d.size.store(0, Release);
        d.buf.store(NULL_OFF, Relaxed);
        for i in 0..DEPOSIT_CELLS {
            d.deposits[i].store(0, Relaxed);
            d.deposit_tags[i].store(DEP_EMPTY, Relaxed);
        }
        // Temporary staging is reverted before the owner leaves: heap and
        // staging geometry after the collective equal the geometry before.
        self.own_header().staging_watermark.store(0, Relaxed);
        d.epoch.store(j + 1, Release);
        Ok(())
    }

    /// Generic wait with periodic mismatch/poison polling.
    fn wait_for<F: Fn() -> bool>(
        &self,
        cond: F,
        poll: &mut WaitPoll<'_>,
        what: &str,
    ) -> Result<()> {
        let mut bo = Backoff::for_collective();
        let mut iters = 0u32;
        while !cond() {
            bo.step(what)?;
            iters = iters.wrapping_add(1);
            if iters >= 256 && iters % 128 == 0 {
                poll.poll()?;
            }
        }
        Ok(())
    }

    /// Broadcasts `nbytes` from the root's `buf` into every PE's `buf`.
    /// `buf` names the same symmetric object everywhere. Any arrival
    /// order is legal; the call returns on each PE once its own payload
    /// obligations are settled.
    pub fn broadcast(&self, root: u32, buf: SymAddr, nbytes: u64) -> Result<()> {
        self.check_live()?;
        self.check_pe(root)?;
        self.check_range(buf, nbytes)?;
        if self.npes == 1 {
            return Ok(());
        }
        let shape = shape_word(CKIND_BROADCAST, 0, 0, root);
        let j = self.desc(self.rank).epoch.load(Relaxed);
        let entry = self.owner_enter(shape, nbytes, 0)?;
        let mut poll = WaitPoll::new(self, j, shape, nbytes);
        let payload_off = self.sym_to_seg(buf);
        let vrank = (self.rank + self.npes - root) % self.npes;
        let mut deposits_made = 0u64;

        if vrank == 0 {
            if self.safe && !entry.handles.is_empty() {
                return Err(self.poison_all("broadcast root received a payload deposit".into()));
            }
        } else {
            // Obtain the payload: consume a handle deposited before entry,
            // or wait for the parent's direct write.
            if let Some(&(tag, r, off)) = entry.handles.first() {
                if self.safe && (tag != DEP_PRIMARY || entry.handles.len() > 1) {
                    return Err(self.poison_all(format!(
                        "broadcast received unexpected deposits (tag {tag})"
                    )));
                }
                let dst = self.seg_ptr(self.rank, payload_off);
                let src = self.seg_ptr(r, off);
                unsafe { active_copy_fn()(dst, src, nbytes as usize) };
                self.desc(r).counter.fetch_add(1, AcqRel);
            } else {
                let d = self.desc(self.rank);
                self.wait_for(|| d.counter.load(Acquire) >= 1, &mut poll, "broadcast payload")?;
            }
        }

        let children: Vec<u32> = match self.bcast_algo {
            BcastAlgo::BinomialTree => binomial_children(vrank, self.npes),
            BcastAlgo::LinearPut => {
                if vrank == 0 {
                    (1..self.npes).collect()
                } else {
                    Vec::new()
                }
            }
        };
        for cv in children {
            let c = (cv + root) % self.npes;
            let (view, g) = self.remote_begin(c, shape, nbytes, j, 0)?;
            if view.entered {
                drop(g);
                let dst = self.seg_ptr(c, payload_off);
                let src = self.seg_ptr(self.rank, payload_off);
                unsafe { active_copy_fn()(dst, src, nbytes as usize) };
                self.desc(c).counter.fetch_add(1, AcqRel);
            } else {
                self.deposit(&g, DEP_PRIMARY, pack_handle(self.rank, payload_off))?;
                drop(g);
                deposits_made += 1;
            }
        }

        let quota = if vrank == 0 { deposits_made } else { 1 + deposits_made };
        self.owner_exit(quota, j, &mut poll)
    }

    /// All-reduce: folds `nelems` elements from every PE's `src` with
    /// `op` and leaves the identical result in every PE's `dst`. `src`
    /// and `dst` are symmetric addresses (they may alias). The fold order
    /// is fixed by the algorithm, so results are bit-identical across
    /// PEs, floats included.
    pub fn reduce<T: ReduceElem>(
        &self,
        op: ReduceOp,
        src: SymAddr,
        dst: SymAddr,
        nelems: u64,
    ) -> Result<()> {
        self.check_live()?;
        let esize = std::mem::size_of::<T>() as u64;
        let nbytes = nelems
            .checked_mul(esize)
            .ok_or_else(|| PoshError::InvalidSize("reduction size overflows".into()))?;
        self.check_range(src, nbytes)?;
        self.check_range(dst, nbytes)?;
        if self.safe {
            for a in [src, dst] {
                if self.sym_to_seg(a) % std::mem::align_of::<T>() as u64 != 0 {
                    return Err(PoshError::BadAlignment(format!(
                        "reduction buffer at offset {:#x} not element-aligned",
                        a.offset()
                    )));
                }
            }
        }
        if self.npes == 1 {
            if src != dst {
                let s = self.seg_ptr(self.rank, self.sym_to_seg(src));
                let d = self.seg_ptr(self.rank, self.sym_to_seg(dst));
                unsafe { active_copy_fn()(d, s, nbytes as usize) };
            }
            return Ok(());
        }
        let shape = shape_word(CKIND_REDUCE, op.code(), T::ELEM_CODE, 0);
        let j = self.desc(self.rank).epoch.load(Relaxed);
        match self.reduce_algo {
            ReduceAlgo::LinearGather => self.reduce_linear::<T>(op, src, dst, nelems, shape, j),
            ReduceAlgo::RecursiveDoubling => self.reduce_rd::<T>(op, src, dst, nelems, shape, j),
        }
    }

    /// Reads `nelems` elements from a segment-relative offset into a Vec.
    fn read_elems<T: ReduceElem>(&self, pe: u32, seg_off: u64, nelems: u64) -> Vec<T> {
        let mut v = Vec::<T>::with_capacity(nelems as usize);
        unsafe {
            std::ptr::copy_nonoverlapping(
                self.seg_ptr(pe, seg_off) as *const T,
                v.as_mut_ptr(),
                nelems as usize,
            );
            v.set_len(nelems as usize);
        }
        v
    }

    fn write_elems<T: ReduceElem>(&self, pe: u32, seg_off: u64, elems: &[T]) {
        unsafe {
            std::ptr::copy_nonoverlapping(
                elems.as_ptr(),
                self.seg_ptr(pe, seg_off) as *mut T,
                elems.len(),
            );
        }
    }

    /// Gather-at-root reduction. Contributors copy their vector into a
    /// slot of the root's staging (allocating it on the root's behalf if
    /// they arrive first), the root folds slot 1..n-1 onto its own vector
    /// in rank order and pushes the result into every PE's `dst`.
    fn reduce_linear<T: ReduceElem>(
        &self,
        op: ReduceOp,
        src: SymAddr,
        dst: SymAddr,
        nelems: u64,
        shape: u32,
        j: u64,
    ) -> Result<()> {
        let nbytes = nelems * std::mem::size_of::<T>() as u64;
        let stride = (nbytes + 15) & !15;
        let gather_need = stride * (self.npes - 1) as u64;
        let mut poll = WaitPoll::new(self, j, shape, nbytes);

        if self.rank == 0 {
            let entry = self.owner_enter(shape, nbytes, gather_need)?;
            if self.safe && !entry.handles.is_empty() {
                return Err(self.poison_all("gather reduce received a deposit".into()));
            }
            let d = self.desc(self.rank);
            let quota = (self.npes - 1) as u64;
            self.wait_for(
                || d.counter.load(Acquire) >= quota,
                &mut poll,
                "reduce contributions",
            )?;
            let mut acc = self.read_elems::<T>(self.rank, self.sym_to_seg(src), nelems);
            for q in 1..self.npes {
                let slot = entry.staging_off + (q - 1) as u64 * stride;
                let theirs = self.read_elems::<T>(self.rank, slot, nelems);
                for (a, b) in acc.iter_mut().zip(theirs) {
                    *a = T::fold(op, *a, b);
                }
            }
            self.write_elems(self.rank, self.sym_to_seg(dst), &acc);
            for q in 1..self.npes {
                let (_view, g) = self.remote_begin(q, shape, nbytes, j, 0)?;
                drop(g);
                self.write_elems(q, self.sym_to_seg(dst), &acc);
                self.desc(q).counter.fetch_add(1, AcqRel);
            }
            self.owner_exit(quota, j, &mut poll)
        } else {
            let entry = self.owner_enter(shape, nbytes, 0)?;
            if self.safe && !entry.handles.is_empty() {
                return Err(self.poison_all("gather reduce received a deposit".into()));
            }
            let (view, g) = self.remote_begin(0, shape, nbytes, j, gather_need)?;
            drop(g);
            if nbytes > 0 {
                let slot = view.buf + (self.rank - 1) as u64 * stride;
                let mine = self.read_elems::<T>(self.rank, self.sym_to_seg(src), nelems);
                self.write_elems(0, slot, &mine);
            }
            self.desc(0).counter.fetch_add(1, AcqRel);
            let d = self.desc(self.rank);
            self.wait_for(|| d.counter.load(Acquire) >= 1, &mut poll, "reduce result")?;
            self.owner_exit(1, j, &mut poll)
        }
    }

    /// Recursive-doubling reduction. Ranks beyond the largest power of
    /// two hand their contribution to a partner first and receive the
    /// finished result back; the power-of-two core exchanges partial
    /// vectors in log2 rounds through per-round staging slots. The
    /// pairwise fold is commutative, so both partners of a round compute
    /// identical bits.
    fn reduce_rd<T: ReduceElem>(
        &self,
        op: ReduceOp,
        src: SymAddr,
        dst: SymAddr,
        nelems: u64,
        shape: u32,
        j: u64,
    ) -> Result<()> {
        let nbytes = nelems * std::mem::size_of::<T>() as u64;
        // Slot: one flag word (16 bytes to keep data aligned) + payload.
        // Flags hold the collective index + 1: staging is reused across
        // collectives without zeroing, so a bare "1" could be stale.
        let stride = 16 + ((nbytes + 15) & !15);
        let m = if self.npes.is_power_of_two() {
            self.npes
        } else {
            (self.npes + 1).next_power_of_two() / 2
        };
        let rounds = m.trailing_zeros() as u64;
        let is_extra = self.rank >= m;
        let has_extra = self.rank + m < self.npes;
        let plan = if is_extra { stride } else { stride * (2 + rounds) };
        let mut poll = WaitPoll::new(self, j, shape, nbytes);

        let entry = self.owner_enter(shape, nbytes, plan)?;
        let base = entry.staging_off;
        let slot_extra = base;
        let slot_round = |r: u64| base + stride * (1 + r);
        let slot_out = if is_extra { base } else { base + stride * (1 + rounds) };

        let mut acc = self.read_elems::<T>(self.rank, self.sym_to_seg(src), nelems);
        let mut deposits_made = 0u64;

        // Materialize early-arrival handles into their slots.
        for &(tag, r, off) in &entry.handles {
            let slot = match tag {
                DEP_EXTRA => slot_extra,
                _ => slot_round(0),
            };
            if self.safe && is_extra {
                return Err(self.poison_all("extra PE received a deposit".into()));
            }
            unsafe {
                active_copy_fn()(
                    self.seg_ptr(self.rank, slot + 16),
                    self.seg_ptr(r, off),
                    nbytes as usize,
                )
            };
            self.stage_flag(self.rank, slot).store(j + 1, Release);
            self.desc(r).counter.fetch_add(1, AcqRel);
        }

        if is_extra {
            let p = self.rank - m;
            let out = self.read_elems::<T>(self.rank, self.sym_to_seg(src), nelems);
            self.write_elems(self.rank, slot_out + 16, &out);
            let (view, g) = self.remote_begin(p, shape, nbytes, j, 0)?;
            if view.entered {
                drop(g);
                self.write_elems(p, view.buf + 16, &out);
                self.stage_flag(p, view.buf).store(j + 1, Release);
                self.desc(p).counter.fetch_add(1, AcqRel);
            } else {
                self.deposit(&g, DEP_EXTRA, pack_handle(self.rank, slot_out + 16))?;
                drop(g);
                deposits_made += 1;
            }
            let d = self.desc(self.rank);
            let quota = 1 + deposits_made;
            self.wait_for(
                || d.counter.load(Acquire) >= quota,
                &mut poll,
                "reduce result (extra)",
            )?;
            return self.owner_exit(quota, j, &mut poll);
        }

        if has_extra {
            let flag = self.stage_flag(self.rank, slot_extra);
            self.wait_for(|| flag.load(Acquire) == j + 1, &mut poll, "extra contribution")?;
            let theirs = self.read_elems::<T>(self.rank, slot_extra + 16, nelems);
            for (a, b) in acc.iter_mut().zip(theirs) {
                *a = T::fold(op, *a, b);
            }
        }

        // Stage the round-0 value in case the partner must pull it.
        self.write_elems(self.rank, slot_out + 16, &acc);
        for r in 0..rounds {
            let q = self.rank ^ (1 << r);
            let (view, g) = self.remote_begin(q, shape, nbytes, j, 0)?;
            if view.entered {
                drop(g);
                self.write_elems(q, view.buf + stride * (1 + r) + 16, &acc);
                self.stage_flag(q, view.buf + stride * (1 + r)).store(j + 1, Release);
                self.desc(q).counter.fetch_add(1, AcqRel);
            } else if r == 0 {
                self.deposit(&g, DEP_PRIMARY, pack_handle(self.rank, slot_out + 16))?;
                drop(g);
                deposits_made += 1;
            } else {
                // A late-round partner may lag in an earlier round of this
                // collective, but it cannot leave without this PE's push:
                // wait for its entry, then push directly.
                drop(g);
                let d = self.desc(q);
                self.wait_for(
                    || d.epoch.load(Acquire) == j && d.owner_in.load(Acquire) == 1,
                    &mut poll,
                    "late-round partner entry",
                )?;
                let (view, g) = self.remote_begin(q, shape, nbytes, j, 0)?;
                drop(g);
                debug_assert!(view.entered);
                self.write_elems(q, view.buf + stride * (1 + r) + 16, &acc);
                self.stage_flag(q, view.buf + stride * (1 + r)).store(j + 1, Release);
                self.desc(q).counter.fetch_add(1, AcqRel);
            }
            let flag = self.stage_flag(self.rank, slot_round(r));
            self.wait_for(|| flag.load(Acquire) == j + 1, &mut poll, "round contribution")?;
            let theirs = self.read_elems::<T>(self.rank, slot_round(r) + 16, nelems);
            for (a, b) in acc.iter_mut().zip(theirs) {
                *a = T::fold(op, *a, b);
            }
        }

        self.write_elems(self.rank, self.sym_to_seg(dst), &acc);
        if has_extra {
            let e = self.rank + m;
            let (_view, g) = self.remote_begin(e, shape, nbytes, j, 0)?;
            drop(g);
            self.write_elems(e, self.sym_to_seg(dst), &acc);
            self.desc(e).counter.fetch_add(1, AcqRel);
        }
        let quota = u64::from(has_extra) + rounds + deposits_made;
        self.owner_exit(quota, j, &mut poll)
    }

    pub fn broadcast_algorithm(&self) -> BcastAlgo {
        self.bcast_algo
    }

    pub fn reduce_algorithm(&self) -> ReduceAlgo {
        self.reduce_algo
    }

    /// Completed broadcast/reduce collectives on a PE (tests inspect the
    /// descriptor lifecycle through this).
    pub fn collective_epoch(&self, pe: u32) -> Result<u64> {
        self.check_pe(pe)?;
        Ok(self.desc(pe).epoch.load(Acquire))
    }

    /// True when a PE's descriptor is fully idle (tests assert the reset
    /// invariant between collectives).
    pub fn descriptor_idle(&self, pe: u32) -> Result<bool> {
        self.check_pe(pe)?;
        let d = self.desc(pe);
        Ok(d.in_progress.load(Acquire) == 0
            && d.owner_in.load(Relaxed) == 0
            && d.counter.load(Relaxed) == 0
            && d.ctype.load(Relaxed) == CKIND_NONE
            && d.size.load(Relaxed) == 0
            && d.buf.load(Relaxed) == NULL_OFF
            && (0..DEPOSIT_CELLS).all(|i| d.deposit_tags[i].load(Relaxed) == DEP_EMPTY))
    }
}
