//! Deterministic allocator for the symmetric heap's data region.
//!
//! Address-ordered first-fit over an intrusive free list, immediate
//! coalescing, 16-byte granularity. Every decision is a pure function of
//! the call sequence: no addresses, time, or randomness feed placement, so
//! PEs that issue identical collective allocation calls obtain identical
//! heap offsets. That property is what lets a local offset stand in for a
//! remote address, so it is load-bearing, not an optimization.
//!
//! Layout inside the data region:
//! * free block: `[size: u64][next: u64]` at the block offset, rest unused;
//! * live block: 16-byte meta `[block_off][block_size | LIVE_BIT]`
//!   immediately before the payload; the block may start earlier than the
//!   meta when alignment forced a front gap too small to stay free.
//!
//! All offsets are segment-relative and 16-aligned; `NULL_OFF` terminates
//! the list. The list head and live counter live in the segment header so
//! peers can digest a remote allocator's state after a barrier.

use std::sync::atomic::Ordering::Relaxed;

use crate::error::PoshError;
use crate::layout::{self, SegmentHeader, NULL_OFF};
use crate::Result;

/// Granularity of sizes and offsets; also the default/minimum alignment.
pub(crate) const ALLOC_ALIGN: u64 = 16;
/// Per-allocation metadata bytes (sits right before the payload).
const META: u64 = 16;
/// Smallest block worth keeping on the free list (node + one granule).
const MIN_BLOCK: u64 = 32;
/// High bit of the meta size word marks the allocation live.
const LIVE_BIT: u64 = 1 << 63;

/// Allocator over one segment's data region. Copy-free view: holds only
/// the mapping base and the region bounds; list roots live in the header.
#[derive(Clone, Copy)]
pub(crate) struct Allocator {
    base: *mut u8,
    data_off: u64,
    data_end: u64,
}

impl Allocator {
    /// # Safety
    /// `base` must map a segment of at least `data_end` bytes whose header
    /// is a [`SegmentHeader`]; the data region `[data_off, data_end)` must
    /// be exclusively managed through this allocator.
    pub(crate) unsafe fn new(base: *mut u8, data_off: u64, data_end: u64) -> Self {
        debug_assert!(data_off % ALLOC_ALIGN == 0 && data_end % ALLOC_ALIGN == 0);
        Allocator { base, data_off, data_end }
    }

    fn header(&self) -> &SegmentHeader {
        unsafe { layout::header(self.base) }
    }

    fn read(&self, off: u64) -> u64 {
        debug_assert!(off % 8 == 0 && off + 8 <= self.data_end);
        unsafe { (self.base.add(off as usize) as *const u64).read() }
    }

    fn write(&self, off: u64, v: u64) {
        debug_assert!(off % 8 == 0 && off + 8 <= self.data_end);
        unsafe { (self.base.add(off as usize) as *mut u64).write(v) }
    }

    fn set_next(&self, prev: u64, next: u64) {
        if prev == NULL_OFF {
            self.header().alloc_free_head.store(next, Relaxed);
        } else {
            self.write(prev + 8, next);
        }
    }

    /// Owner-side one-time setup: the whole data region is one free block.
    pub(crate) fn init(&self) {
        let len = self.data_end - self.data_off;
        self.write(self.data_off, len);
        self.write(self.data_off + 8, NULL_OFF);
        self.header().alloc_free_head.store(self.data_off, Relaxed);
        self.header().alloc_live.store(0, Relaxed);
    }

    /// First-fit allocation. Returns the payload offset.
    pub(crate) fn allocate(&self, size_req: u64, align_req: u64) -> Result<u64> {
        if size_req == 0 {
            return Err(PoshError::InvalidSize("zero-byte allocation".into()));
        }
        let align = if align_req == 0 { ALLOC_ALIGN } else { align_req };
        if !align.is_power_of_two() {
            return Err(PoshError::BadAlignment(format!("{align_req} is not a power of two")));
        }
        let align = align.max(ALLOC_ALIGN);
        let size = size_req
            .checked_add(ALLOC_ALIGN - 1)
            .ok_or(PoshError::OutOfMemory { requested: size_req })?
            & !(ALLOC_ALIGN - 1);

        let mut prev = NULL_OFF;
        let mut cur = self.header().alloc_free_head.load(Relaxed);
        while cur != NULL_OFF {
            let bsize = self.read(cur);
            let bnext = self.read(cur + 8);
            let block_end = cur + bsize;

            // Candidate payload: first aligned spot leaving room for meta.
            // A front gap must either vanish or stay listable.
            let mut payload = (cur + META + align - 1) & !(align - 1);
            let mut gap = payload - META - cur;
            if gap > 0 && gap < MIN_BLOCK {
                payload = (cur + META + MIN_BLOCK + align - 1) & !(align - 1);
                gap = payload - META - cur;
            }
            let need_end = payload + size;

            if need_end <= block_end {
                let alloc_off = cur + gap;
                let tail = block_end - need_end;
                let (alloc_size, next_after) = if tail >= MIN_BLOCK {
                    self.write(need_end, tail);
                    self.write(need_end + 8, bnext);
                    (need_end - alloc_off, need_end)
                } else {
                    (block_end - alloc_off, bnext)
                };
                if gap > 0 {
                    self.write(cur, gap);
                    self.write(cur + 8, next_after);
                } else {
                    self.set_next(prev, next_after);
                }
                self.write(payload - 16, alloc_off);
                self.write(payload - 8, alloc_size | LIVE_BIT);
                self.header().alloc_live.fetch_add(1, Relaxed);
                return Ok(payload);
            }
            prev = cur;
            cur = bnext;
        }
        Err(PoshError::OutOfMemory { requested: size_req })
    }

    /// Frees a payload produced by [`Allocator::allocate`], coalescing
    /// with both neighbors. Rejects foreign, misaligned, and repeated
    /// frees via the meta live bit and bounds checks.
    pub(crate) fn deallocate(&self, payload: u64) -> Result<()> {
        if payload % ALLOC_ALIGN != 0 || payload < self.data_off + META || payload > self.data_end
        {
            return Err(PoshError::InvalidFree { offset: payload, what: "outside heap data region" });
        }
        let block_off = self.read(payload - 16);
        let size_word = self.read(payload - 8);
        if size_word & LIVE_BIT == 0 {
            return Err(PoshError::InvalidFree {
                offset: payload,
                what: "not a live allocation (double free or foreign pointer)",
            });
        }
        let bsize = size_word & !LIVE_BIT;
        let meta_ok = block_off % ALLOC_ALIGN == 0
            && bsize % ALLOC_ALIGN == 0
            && bsize >= MIN_BLOCK
            && block_off >= self.data_off
            && block_off <= payload - META
            && block_off + bsize <= self.data_end
            && payload <= block_off + bsize;
        if !meta_ok {
            return Err(PoshError::InvalidFree { offset: payload, what: "corrupt allocation metadata" });
        }
        self.write(payload - 8, size_word & !LIVE_BIT);

        // Address-ordered insert with forward/backward coalescing.
        let mut prev = NULL_OFF;
        let mut cur = self.header().alloc_free_head.load(Relaxed);
        while cur != NULL_OFF && cur < block_off {
            prev = cur;
            cur = self.read(cur + 8);
        }
        let mut size = bsize;
        let mut next = cur;
        if cur != NULL_OFF && block_off + size == cur {
            size += self.read(cur);
            next = self.read(cur + 8);
        }
        if prev != NULL_OFF && prev + self.read(prev) == block_off {
            let merged = self.read(prev) + size;
            self.write(prev, merged);
            self.write(prev + 8, next);
        } else {
            self.write(block_off, size);
            self.write(block_off + 8, next);
            self.set_next(prev, block_off);
        }
        self.header().alloc_live.fetch_sub(1, Relaxed);
        Ok(())
    }

    pub(crate) fn live(&self) -> u64 {
        self.header().alloc_live.load(Relaxed)
    }

    /// Digest of the allocator state: live count plus every free block's
    /// (offset, size). Identical across PEs whenever the call sequences
    /// matched, so tests compare it remotely after a barrier.
    pub(crate) fn state_hash(&self) -> u64 {
        let mut h = layout::fnv1a64_word(layout::FNV_SEED, self.live());
        let mut cur = self.header().alloc_free_head.load(Relaxed);
        while cur != NULL_OFF {
            h = layout::fnv1a64_word(h, cur);
            h = layout::fnv1a64_word(h, self.read(cur));
            cur = self.read(cur + 8);
        }
        h
    }

    /// Largest single allocation the current free list could satisfy with
    /// default alignment (diagnostics and tests).
    pub(crate) fn largest_free(&self) -> u64 {
        let mut best = 0;
        let mut cur = self.header().alloc_free_head.load(Relaxed);
        while cur != NULL_OFF {
            best = best.max(self.read(cur).saturating_sub(META));
            cur = self.read(cur + 8);
        }
        best
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::layout::Geometry;
    use proptest::prelude::*;

    /// In-process stand-in for a mapped segment: zeroed, 16-aligned memory
    /// with a real header at offset 0. The allocator never checks magic,
    /// so no shm is needed to exercise it.
    struct TestHeap {
        _buf: Vec<u128>,
        alloc: Allocator,
        geo: Geometry,
    }

    impl TestHeap {
        fn new(capacity: u64) -> Self {
            let geo = Geometry::for_capacity(capacity).unwrap();
            let words = (capacity as usize) / 16;
            let buf = vec![0u128; words];
            let base = buf.as_ptr() as *mut u8;
            let alloc = unsafe { Allocator::new(base, geo.data_off, geo.capacity) };
            alloc.init();
            TestHeap { _buf: buf, alloc, geo }
        }
    }

    #[test]
    fn first_allocation_lands_after_meta() {
        let h = TestHeap::new(1024 * 1024);
        let p = h.alloc.allocate(64, 0).unwrap();
        assert_eq!(p, h.geo.data_off + META);
        assert_eq!(h.alloc.live(), 1);
    }

    #[test]
    fn free_then_realloc_same_size_reuses_offset() {
        let h = TestHeap::new(1024 * 1024);
        let a = h.alloc.allocate(128, 0).unwrap();
        h.alloc.deallocate(a).unwrap();
        let b = h.alloc.allocate(128, 0).unwrap();
        assert_eq!(a, b);
        assert_eq!(h.alloc.live(), 1);
    }

    #[test]
    fn first_fit_reuses_freed_hole() {
        let h = TestHeap::new(1024 * 1024);
        let p1 = h.alloc.allocate(17, 0).unwrap();
        let _p2 = h.alloc.allocate(32, 0).unwrap();
        h.alloc.deallocate(p1).unwrap();
        let p3 = h.alloc.allocate(17, 0).unwrap();
        assert_eq!(p3, p1, "first fit must reuse the freed hole");
    }

    #[test]
    fn aligned_allocation_and_free() {
        let h = TestHeap::new(1024 * 1024);
        let _pad = h.alloc.allocate(24, 0).unwrap();
        let p = h.alloc.allocate(100, 4096).unwrap();
        assert_eq!(p % 4096, 0);
        h.alloc.deallocate(p).unwrap();
        let again = h.alloc.allocate(100, 4096).unwrap();
        assert_eq!(again, p);
    }

    #[test]
    fn non_power_of_two_alignment_rejected() {
        let h = TestHeap::new(1024 * 1024);
        let err = h.alloc.allocate(8, 3).unwrap_err();
        assert!(matches!(err, PoshError::BadAlignment(_)), "got {err}");
    }

    #[test]
    fn zero_size_rejected() {
        let h = TestHeap::new(1024 * 1024);
        assert!(matches!(h.alloc.allocate(0, 0), Err(PoshError::InvalidSize(_))));
    }

    #[test]
    fn double_free_detected() {
        let h = TestHeap::new(1024 * 1024);
        let p = h.alloc.allocate(64, 0).unwrap();
        h.alloc.deallocate(p).unwrap();
        let err = h.alloc.deallocate(p).unwrap_err();
        assert!(matches!(err, PoshError::InvalidFree { .. }), "got {err}");
    }

    #[test]
    fn foreign_pointer_free_detected() {
        let h = TestHeap::new(1024 * 1024);
        let p = h.alloc.allocate(64, 0).unwrap();
        assert!(h.alloc.deallocate(p + 16).is_err());
        assert!(h.alloc.deallocate(h.geo.data_off).is_err());
        assert!(h.alloc.deallocate(123).is_err());
    }

    #[test]
    fn oom_reports_and_recovers() {
        let h = TestHeap::new(1024 * 1024);
        let too_big = h.geo.usable() + 1;
        assert!(matches!(
            h.alloc.allocate(too_big, 0),
            Err(PoshError::OutOfMemory { .. })
        ));
        h.alloc.allocate(64, 0).unwrap();
    }

    #[test]
    fn full_coalescing_restores_one_block() {
        let h = TestHeap::new(1024 * 1024);
        let before = h.alloc.state_hash();
        let mut ps = Vec::new();
        for i in 1..=40u64 {
            ps.push(h.alloc.allocate(i * 24 % 513 + 1, 0).unwrap());
        }
        // Free in an interleaved order to exercise both coalesce directions.
        for idx in (0..ps.len()).step_by(2).chain((0..ps.len()).skip(1).step_by(2)) {
            h.alloc.deallocate(ps[idx]).unwrap();
        }
        assert_eq!(h.alloc.live(), 0);
        assert_eq!(h.alloc.state_hash(), before, "heap must coalesce back to pristine");
        let p = h.alloc.allocate(h.alloc.largest_free(), 0).unwrap();
        h.alloc.deallocate(p).unwrap();
    }

    /// Replays one script on a fresh heap, returning placements and the
    /// final digest. Determinism means two replays agree exactly.
    fn replay(capacity: u64, script: &[(u8, u64, u64)]) -> (Vec<u64>, u64) {
        let h = TestHeap::new(capacity);
        let mut livep: Vec<u64> = Vec::new();
        let mut outs = Vec::new();
        for &(op, a, b) in script {
            match op {
                0 => {
                    if let Ok(p) = h.alloc.allocate(a % 8192 + 1, 16 << (b % 9)) {
                        livep.push(p);
                        outs.push(p);
                    }
                }
                _ => {
                    if !livep.is_empty() {
                        let idx = (a as usize) % livep.len();
                        let p = livep.swap_remove(idx);
                        h.alloc.deallocate(p).unwrap();
                    }
                }
            }
        }
        (outs, h.alloc.state_hash())
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn placements_are_a_pure_function_of_the_script(
            script in proptest::collection::vec((0u8..2, 0u64..10_000, 0u64..16), 0..120)
        ) {
            let (a_offs, a_hash) = replay(4 * 1024 * 1024, &script);
            let (b_offs, b_hash) = replay(4 * 1024 * 1024, &script);
            prop_assert_eq!(a_offs, b_offs);
            prop_assert_eq!(a_hash, b_hash);
        }

        #[test]
        fn live_payloads_never_overlap_and_stay_in_bounds(
            script in proptest::collection::vec((0u8..2, 0u64..10_000, 0u64..16), 0..120)
        ) {
            let geo = Geometry::for_capacity(4 * 1024 * 1024).unwrap();
            let h = TestHeap::new(4 * 1024 * 1024);
            let mut live: Vec<(u64, u64)> = Vec::new();
            for &(op, a, b) in &script {
                match op {
                    0 => {
                        let size = a % 8192 + 1;
                        let align = 16u64 << (b % 9);
                        if let Ok(p) = h.alloc.allocate(size, align) {
                            prop_assert_eq!(p % align, 0);
                            prop_assert!(p >= geo.data_off + META);
                            prop_assert!(p + size <= geo.capacity);
                            for &(q, qs) in &live {
                                prop_assert!(p + size <= q || q + qs <= p,
                                    "overlap: ({},{}) vs ({},{})", p, size, q, qs);
                            }
                            live.push((p, size));
                        }
                    }
                    _ => {
                        if !live.is_empty() {
                            let idx = (a as usize) % live.len();
                            let (p, _) = live.swap_remove(idx);
                            h.alloc.deallocate(p).unwrap();
                        }
                    }
                }
            }
            prop_assert_eq!(h.alloc.live(), live.len() as u64);
        }
    }
}
