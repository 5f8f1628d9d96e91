//! One-sided transfers and interchangeable copy strategies.
//!
//! `put`/`get` resolve the remote address through the symmetric-offset rule
//! and hand the byte range to the active copy routine. The routine is a
//! function pointer resolved once (build feature, else platform default,
//! overridable at runtime through [`select_copy_strategy`]), so the hot
//! path is translate + one indirect call: no per-transfer branching on the
//! strategy. Transfers are one-sided: the target PE executes nothing.
//!
//! Completion semantics: when `put` returns, the source buffer is
//! reusable; the data is visible to the target's PE after a synchronizing
//! operation (barrier, collective, or an atomic handshake). `get` returns
//! with the data in the destination buffer.

use std::str::FromStr;
use std::sync::atomic::{AtomicU8, AtomicUsize, Ordering};

use crate::error::PoshError;
use crate::symheap::{SymAddr, World};
use crate::Result;

/// Copy routine selection. `Default` is the platform `memcpy` path;
/// `ByteLoop` moves one byte per iteration (portability baseline);
/// `WideBlock` moves 32-byte blocks through unaligned 128-bit loads with
/// scalar head/tail fixup.
#[derive(Clone, Copy, PartialEq, Eq, Debug, Hash)]
pub enum CopyStrategy {
    Default,
    ByteLoop,
    WideBlock,
}

impl CopyStrategy {
    pub const ALL: [CopyStrategy; 3] =
        [CopyStrategy::Default, CopyStrategy::ByteLoop, CopyStrategy::WideBlock];

    /// Stable name used in CSV output and CLI arguments.
    pub fn name(self) -> &'static str {
        match self {
            CopyStrategy::Default => "default",
            CopyStrategy::ByteLoop => "byteloop",
            CopyStrategy::WideBlock => "wideblock",
        }
    }
}

impl FromStr for CopyStrategy {
    type Err = PoshError;

    fn from_str(s: &str) -> Result<CopyStrategy> {
        match s {
            "default" => Ok(CopyStrategy::Default),
            "byteloop" => Ok(CopyStrategy::ByteLoop),
            "wideblock" => Ok(CopyStrategy::WideBlock),
            other => Err(PoshError::BadConfig(format!(
                "unknown copy strategy {other:?} (default|byteloop|wideblock)"
            ))),
        }
    }
}

impl std::fmt::Display for CopyStrategy {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// Signature shared by all copy routines. Ranges must not overlap.
pub(crate) type CopyFn = unsafe fn(dst: *mut u8, src: *const u8, n: usize);

unsafe fn copy_default(dst: *mut u8, src: *const u8, n: usize) {
    std::ptr::copy_nonoverlapping(src, dst, n);
}

unsafe fn copy_byteloop(dst: *mut u8, src: *const u8, n: usize) {
    for i in 0..n {
        *dst.add(i) = *src.add(i);
    }
}

unsafe fn copy_wideblock(dst: *mut u8, src: *const u8, n: usize) {
    let mut i = 0usize;
    // Scalar head until the destination is 32-byte aligned.
    let mis = (dst as usize) & 31;
    if mis != 0 {
        let head = (32 - mis).min(n);
        for k in 0..head {
            *dst.add(k) = *src.add(k);
        }
        i = head;
    }
    // 32-byte blocks: two unaligned 128-bit loads, two aligned stores.
    while i + 32 <= n {
        let a = (src.add(i) as *const u128).read_unaligned();
        let b = (src.add(i + 16) as *const u128).read_unaligned();
        (dst.add(i) as *mut u128).write(a);
        (dst.add(i + 16) as *mut u128).write(b);
        i += 32;
    }
    while i < n {
        *dst.add(i) = *src.add(i);
        i += 1;
    }
}

fn strategy_fn(s: CopyStrategy) -> CopyFn {
    match s {
        CopyStrategy::Default => copy_default,
        CopyStrategy::ByteLoop => copy_byteloop,
        CopyStrategy::WideBlock => copy_wideblock,
    }
}

#[cfg(all(feature = "copy-byteloop", feature = "copy-wideblock"))]
compile_error!("features copy-byteloop and copy-wideblock are mutually exclusive");

/// Build-time default and whether it was chosen explicitly.
fn build_default() -> (CopyStrategy, bool) {
    if cfg!(feature = "copy-byteloop") {
        (CopyStrategy::ByteLoop, true)
    } else if cfg!(feature = "copy-wideblock") {
        (CopyStrategy::WideBlock, true)
    } else {
        (CopyStrategy::Default, false)
    }
}

/// Active strategy id (+1; 0 = unresolved) and its routine.
static ACTIVE_ID: AtomicU8 = AtomicU8::new(0);
static ACTIVE_FN: AtomicUsize = AtomicUsize::new(0);

fn store_active(s: CopyStrategy) {
    ACTIVE_FN.store(strategy_fn(s) as usize, Ordering::Relaxed);
    ACTIVE_ID.store(s as u8 + 1, Ordering::Release);
}

fn id_of(v: u8) -> CopyStrategy {
    CopyStrategy::ALL[(v - 1) as usize]
}

/// Resolves the active strategy if nothing chose one yet, warning once
/// when the build left it unspecified.
pub(crate) fn resolve_active_copy() -> CopyStrategy {
    let cur = ACTIVE_ID.load(Ordering::Acquire);
    if cur != 0 {
        return id_of(cur);
    }
    let (s, explicit) = build_default();
    if !explicit {
        static WARNED: AtomicU8 = AtomicU8::new(0);
        if WARNED.swap(1, Ordering::Relaxed) == 0 {
            eprintln!("posh: no copy strategy selected at build time, using platform default");
        }
    }
    store_active(s);
    s
}

/// Switches the copy routine used by all subsequent transfers in this
/// process and returns the now-active strategy.
pub fn select_copy_strategy(s: CopyStrategy) -> CopyStrategy {
    store_active(s);
    s
}

/// Strategy currently in effect (resolving the default on first use).
pub fn active_copy_strategy() -> CopyStrategy {
    resolve_active_copy()
}

pub(crate) fn active_copy_fn() -> CopyFn {
    resolve_active_copy();
    let f = ACTIVE_FN.load(Ordering::Relaxed);
    unsafe { std::mem::transmute::<usize, CopyFn>(f) }
}

/// Runs one strategy directly on private buffers (benchmarks, tests).
///
/// # Safety
/// `dst` and `src` must be valid for `n` bytes and must not overlap.
pub unsafe fn copy_with(s: CopyStrategy, dst: *mut u8, src: *const u8, n: usize) {
    strategy_fn(s)(dst, src, n)
}

/// Scalar element transferable with `put_elem`/`get_elem`. Sealed: every
/// primitive fixed-width numeric type, one blanket implementation each.
pub trait ScalarElem: Copy + private::Sealed {}

mod private {
    pub trait Sealed {}
}

macro_rules! scalar_elem {
    ($($t:ty),*) => {
        $(
            impl private::Sealed for $t {}
            impl ScalarElem for $t {}
        )*
    };
}

scalar_elem!(i8, i16, i32, i64, i128, u8, u16, u32, u64, u128, f32, f64);

impl World {
    /// One-sided write of `src` into the target PE's heap at `dest`.
    pub fn put(&self, target_pe: u32, dest: SymAddr, src: &[u8]) -> Result<()> {
        self.check_live()?;
        self.check_pe(target_pe)?;
        self.check_range(dest, src.len() as u64)?;
        let dst = self.seg_ptr(target_pe, self.sym_to_seg(dest));
        unsafe { active_copy_fn()(dst, src.as_ptr(), src.len()) };
        Ok(())
    }

    /// One-sided read from the source PE's heap at `src` into `dest`.
    pub fn get(&self, source_pe: u32, src: SymAddr, dest: &mut [u8]) -> Result<()> {
        self.check_live()?;
        self.check_pe(source_pe)?;
        self.check_range(src, dest.len() as u64)?;
        let p = self.seg_ptr(source_pe, self.sym_to_seg(src));
        unsafe { active_copy_fn()(dest.as_mut_ptr(), p, dest.len()) };
        Ok(())
    }

    /// Typed single-element put. The address must be element-aligned.
    pub fn put_elem<T: ScalarElem>(&self, target_pe: u32, dest: SymAddr, value: T) -> Result<()> {
        self.check_live()?;
        self.check_pe(target_pe)?;
        let size = std::mem::size_of::<T>() as u64;
        self.check_range(dest, size)?;
        self.check_elem_align::<T>(dest)?;
        let p = self.seg_ptr(target_pe, self.sym_to_seg(dest)) as *mut T;
        unsafe { p.write(value) };
        Ok(())
    }

    /// Typed single-element get. The address must be element-aligned.
    pub fn get_elem<T: ScalarElem>(&self, source_pe: u32, src: SymAddr) -> Result<T> {
        self.check_live()?;
        self.check_pe(source_pe)?;
        let size = std::mem::size_of::<T>() as u64;
        self.check_range(src, size)?;
        self.check_elem_align::<T>(src)?;
        let p = self.seg_ptr(source_pe, self.sym_to_seg(src)) as *const T;
        Ok(unsafe { p.read() })
    }

    fn check_elem_align<T>(&self, addr: SymAddr) -> Result<()> {
        if self.safe {
            let align = std::mem::align_of::<T>() as u64;
            if self.sym_to_seg(addr) % align != 0 {
                return Err(PoshError::BadAlignment(format!(
                    "offset {:#x} not aligned to {align}-byte element",
                    addr.offset()
                )));
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    /// Reference copy via the standard library.
    fn oracle(src: &[u8]) -> Vec<u8> {
        src.to_vec()
    }

    fn run_strategy(s: CopyStrategy, src: &[u8], dst_align_off: usize) -> Vec<u8> {
        // Over-allocate so the destination can start at any misalignment.
        let mut dst = vec![0u8; src.len() + 64];
        unsafe {
            copy_with(s, dst.as_mut_ptr().add(dst_align_off), src.as_ptr(), src.len());
        }
        dst[dst_align_off..dst_align_off + src.len()].to_vec()
    }

    #[test]
    fn strategies_agree_on_size_alignment_grid() {
        let payload: Vec<u8> =
            (0..40_064u32).map(|i| i.wrapping_mul(2_654_435_761) as u8).collect();
        for &n in &[0usize, 1, 2, 15, 16, 17, 31, 32, 33, 63, 64, 65, 255, 4096, 39_999] {
            for &src_off in &[0usize, 1, 7, 16, 31] {
                for &dst_off in &[0usize, 1, 8, 15, 32] {
                    let src = &payload[src_off..src_off + n];
                    let want = oracle(src);
                    for s in CopyStrategy::ALL {
                        assert_eq!(
                            run_strategy(s, src, dst_off),
                            want,
                            "strategy {s} n={n} src_off={src_off} dst_off={dst_off}"
                        );
                    }
                }
            }
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(128))]

        #[test]
        fn strategies_are_byte_identical(
            data in proptest::collection::vec(any::<u8>(), 0..5000),
            src_off in 0usize..32,
            dst_off in 0usize..32,
        ) {
            let mut padded = vec![0u8; data.len() + 32];
            padded[src_off..src_off + data.len()].copy_from_slice(&data);
            let src = &padded[src_off..src_off + data.len()];
            let want = oracle(src);
            for s in CopyStrategy::ALL {
                prop_assert_eq!(&run_strategy(s, src, dst_off), &want, "strategy {}", s);
            }
        }
    }

    #[test]
    fn strategy_names_round_trip() {
        for s in CopyStrategy::ALL {
            assert_eq!(s.name().parse::<CopyStrategy>().unwrap(), s);
        }
        assert!("sse2".parse::<CopyStrategy>().is_err());
    }

    #[test]
    fn selection_switches_and_reports() {
        let before = active_copy_strategy();
        assert_eq!(select_copy_strategy(CopyStrategy::ByteLoop), CopyStrategy::ByteLoop);
        assert_eq!(active_copy_strategy(), CopyStrategy::ByteLoop);
        select_copy_strategy(before);
    }

    #[test]
    fn world_put_get_round_trip_single_pe() {
        use crate::symheap::test_support::*;
        use crate::symheap::InitConfig;
        let _g = WORLD_GATE.lock().unwrap();
        let w = World::init_with(InitConfig::standalone(0, 1, &unique_jobid("dm"), 1024 * 1024))
            .unwrap();
        let buf = w.shmalloc(4096).unwrap();
        let src: Vec<u8> = (0..4096u32).map(|i| (i % 251) as u8).collect();
        w.put(0, buf, &src).unwrap();
        let mut back = vec![0u8; 4096];
        w.get(0, buf, &mut back).unwrap();
        assert_eq!(src, back);

        // Typed elements, including float bit patterns.
        let cell = w.shmalloc(8).unwrap();
        w.put_elem::<f64>(0, cell, -0.0).unwrap();
        let v: f64 = w.get_elem(0, cell).unwrap();
        assert_eq!(v.to_bits(), (-0.0f64).to_bits());
        w.put_elem::<u32>(0, cell, 0xDEAD_BEEF).unwrap();
        assert_eq!(w.get_elem::<u32>(0, cell).unwrap(), 0xDEAD_BEEF);

        // Safe-mode misalignment and bounds.
        assert!(matches!(
            w.put_elem::<u64>(0, cell.add(4), 1),
            Err(PoshError::BadAlignment(_))
        ));
        let usable = w.usable_bytes();
        assert!(matches!(
            w.put(0, SymAddr(usable - 8), &[0u8; 16]),
            Err(PoshError::OutOfBounds { .. })
        ));
        assert!(w.put(0, SymAddr(usable - 16), &[0u8; 16]).is_ok());
        w.finalize().unwrap();
    }
}
