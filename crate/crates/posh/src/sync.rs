//! Named distributed locks and remote atomic operations.
//!
//! A lock name hashes to a home PE and a slot in that PE's header lock
//! table. The slot cell packs a 32-bit name fingerprint with the holder's
//! rank, so a holder can recognize its own cell (re-entry detection) and
//! release can verify ownership. Distinct names may share a slot; they
//! then contend as one lock, which is safe, merely slower.
//!
//! Remote atomics reinterpret a symmetric address in the target segment
//! as the matching atomic integer and apply the operation through the
//! shared mapping, which is exactly how every other PE sees that word.

use std::sync::atomic::Ordering::{AcqRel, Acquire, Relaxed, Release};
use std::sync::atomic::{AtomicI32, AtomicI64, AtomicU32, AtomicU64};

use crate::error::PoshError;
use crate::layout::{fnv1a64, LOCK_SLOTS};
use crate::symheap::{SymAddr, World};
use crate::wait::Backoff;
use crate::Result;

const LOCK_FREE: u64 = 0;

/// Home PE, slot index, and cell value for a named lock held by `rank`.
fn lock_coords(name: &str, npes: u32, rank: u32) -> (u32, usize, u64) {
    let h = fnv1a64(name.as_bytes());
    let home = (h % npes as u64) as u32;
    let slot = ((h >> 32) % LOCK_SLOTS as u64) as usize;
    let fingerprint = (h & 0xFFFF_FFFF) as u32;
    let cell = ((fingerprint as u64) << 32) | (((rank as u64) + 1) << 1) | 1;
    (home, slot, cell)
}

impl World {
    fn lock_cell(&self, name: &str) -> (&AtomicU64, u64) {
        let (home, slot, cell) = lock_coords(name, self.npes, self.rank);
        (&self.peer_header(home).locks[slot], cell)
    }

    /// Acquires the named lock, spinning until it is free. Acquiring a
    /// lock this PE already holds is reported as an error rather than a
    /// deadlock.
    pub fn lock_acquire(&self, name: &str) -> Result<()> {
        self.check_live()?;
        let (cell, mine) = self.lock_cell(name);
        let mut bo = Backoff::new();
        loop {
            match cell.compare_exchange_weak(LOCK_FREE, mine, Acquire, Relaxed) {
                Ok(_) => return Ok(()),
                Err(cur) => {
                    if cur == mine {
                        return Err(PoshError::LockReentry { key: name.to_string() });
                    }
                    bo.step("named lock")?;
                }
            }
        }
    }

    /// Single acquisition attempt: `true` when the lock was taken.
    pub fn lock_test(&self, name: &str) -> Result<bool> {
        self.check_live()?;
        let (cell, mine) = self.lock_cell(name);
        match cell.compare_exchange(LOCK_FREE, mine, Acquire, Relaxed) {
            Ok(_) => Ok(true),
            Err(cur) if cur == mine => Err(PoshError::LockReentry { key: name.to_string() }),
            Err(_) => Ok(false),
        }
    }

    /// Releases the named lock; fails if this PE does not hold it.
    pub fn lock_release(&self, name: &str) -> Result<()> {
        self.check_live()?;
        let (cell, mine) = self.lock_cell(name);
        match cell.compare_exchange(mine, LOCK_FREE, Release, Relaxed) {
            Ok(_) => Ok(()),
            Err(_) => Err(PoshError::LockNotHeld { key: name.to_string() }),
        }
    }
}

mod atomic_private {
    pub trait Sealed {}
}

/// Integer types usable with the remote atomic operations.
pub trait AtomicInt: Copy + PartialEq + atomic_private::Sealed {
    #[doc(hidden)]
    const ONE: Self;
    #[doc(hidden)]
    unsafe fn fetch_add_at(p: *mut u8, v: Self) -> Self;
    #[doc(hidden)]
    unsafe fn swap_at(p: *mut u8, v: Self) -> Self;
    #[doc(hidden)]
    unsafe fn compare_swap_at(p: *mut u8, expected: Self, desired: Self) -> Self;
}

macro_rules! atomic_int {
    ($t:ty, $at:ty) => {
        impl atomic_private::Sealed for $t {}
        impl AtomicInt for $t {
            const ONE: Self = 1;
            unsafe fn fetch_add_at(p: *mut u8, v: Self) -> Self {
                (*(p as *const $at)).fetch_add(v, AcqRel)
            }
            unsafe fn swap_at(p: *mut u8, v: Self) -> Self {
                (*(p as *const $at)).swap(v, AcqRel)
            }
            unsafe fn compare_swap_at(p: *mut u8, expected: Self, desired: Self) -> Self {
                match (*(p as *const $at)).compare_exchange(expected, desired, AcqRel, Acquire) {
                    Ok(prev) => prev,
                    Err(prev) => prev,
                }
            }
        }
    };
}

atomic_int!(i32, AtomicI32);
atomic_int!(u32, AtomicU32);
atomic_int!(i64, AtomicI64);
atomic_int!(u64, AtomicU64);

impl World {
    /// Bounds- and alignment-checked pointer to an atomic word on a PE.
    fn atomic_ptr<T: AtomicInt>(&self, pe: u32, addr: SymAddr) -> Result<*mut u8> {
        let size = std::mem::size_of::<T>() as u64;
        self.check_live()?;
        self.check_pe(pe)?;
        self.check_range(addr, size)?;
        let seg_off = self.sym_to_seg(addr);
        if seg_off % size != 0 {
            return Err(PoshError::BadAlignment(format!(
                "atomic operand at offset {:#x} not {size}-byte aligned",
                addr.offset()
            )));
        }
        Ok(self.seg_ptr(pe, seg_off))
    }

    /// Atomically adds `value` to the word at `addr` on `pe`; returns the
    /// previous value.
    pub fn atomic_fetch_add<T: AtomicInt>(&self, pe: u32, addr: SymAddr, value: T) -> Result<T> {
        let p = self.atomic_ptr::<T>(pe, addr)?;
        Ok(unsafe { T::fetch_add_at(p, value) })
    }

    /// Atomically increments the word at `addr` on `pe` by one; returns
    /// the previous value.
    pub fn atomic_fetch_inc<T: AtomicInt>(&self, pe: u32, addr: SymAddr) -> Result<T> {
        self.atomic_fetch_add(pe, addr, T::ONE)
    }

    /// Atomically replaces the word at `addr` on `pe`; returns the
    /// previous value.
    pub fn atomic_swap<T: AtomicInt>(&self, pe: u32, addr: SymAddr, value: T) -> Result<T> {
        let p = self.atomic_ptr::<T>(pe, addr)?;
        Ok(unsafe { T::swap_at(p, value) })
    }

    /// Atomic compare-and-swap on the word at `addr` on `pe`: installs
    /// `desired` iff the current value equals `expected`. Returns the
    /// previous value (equal to `expected` exactly when the swap took).
    pub fn atomic_compare_swap<T: AtomicInt>(
        &self,
        pe: u32,
        addr: SymAddr,
        expected: T,
        desired: T,
    ) -> Result<T> {
        let p = self.atomic_ptr::<T>(pe, addr)?;
        Ok(unsafe { T::compare_swap_at(p, expected, desired) })
    }
}
