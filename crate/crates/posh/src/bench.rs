//! Latency/bandwidth measurement for local copies and one-sided put/get.
//!
//! Methodology: every (kind, strategy, size) combination is measured as
//! one discarded warmup repetition followed by `reps` timed repetitions.
//! Sizes below [`BANDWIDTH_CUTOFF`] are timed as a loop of
//! [`LATENCY_LOOP`] back-to-back operations and reported as fractional
//! nanoseconds per operation; larger sizes are timed one operation at a
//! time and additionally reported as bandwidth (`bytes * 8 / ns`, i.e.
//! Gbit/s). Records serialize to a stable CSV whose floats round-trip
//! bit-exactly through their shortest decimal form.

use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use crate::datamover::{copy_with, select_copy_strategy, CopyStrategy};
use crate::error::PoshError;
use crate::symheap::World;
use crate::Result;

/// Operations per timed repetition for sub-cutoff sizes.
pub const LATENCY_LOOP: u32 = 1000;
/// Sizes at or above this are single-shot timed and get a bandwidth figure.
pub const BANDWIDTH_CUTOFF: u64 = 64 * 1024;
/// CSV column header, fixed; parsers reject anything else.
pub const CSV_HEADER: &str = "kind,strategy,nbytes,rep,elapsed_ns,bandwidth_gbps";

/// What is being timed.
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum BenchKind {
    /// Copy between two private local buffers (baseline).
    LocalCopy,
    /// One-sided write into a peer's heap.
    Put,
    /// One-sided read from a peer's heap.
    Get,
}

impl BenchKind {
    pub const ALL: [BenchKind; 3] = [BenchKind::LocalCopy, BenchKind::Put, BenchKind::Get];

    pub fn name(self) -> &'static str {
        match self {
            BenchKind::LocalCopy => "localcopy",
            BenchKind::Put => "put",
            BenchKind::Get => "get",
        }
    }
}

impl FromStr for BenchKind {
    type Err = PoshError;
    fn from_str(s: &str) -> Result<BenchKind> {
        match s {
            "localcopy" => Ok(BenchKind::LocalCopy),
            "put" => Ok(BenchKind::Put),
            "get" => Ok(BenchKind::Get),
            _ => Err(PoshError::BadConfig(format!(
                "unknown bench kind {s:?} (localcopy|put|get)"
            ))),
        }
    }
}

impl fmt::Display for BenchKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// One timed repetition.
#[derive(Clone, Copy, PartialEq, Debug)]
pub struct BenchRecord {
    pub kind: BenchKind,
    pub strategy: CopyStrategy,
    pub nbytes: u64,
    pub rep: u32,
    /// Nanoseconds per operation (fractional below the cutoff).
    pub elapsed_ns: f64,
    /// Gbit/s, present for sizes at or above the cutoff.
    pub bandwidth_gbps: Option<f64>,
}

/// Sweep selection.
#[derive(Clone, Debug)]
pub struct BenchConfig {
    pub kinds: Vec<BenchKind>,
    pub strategies: Vec<CopyStrategy>,
    pub sizes: Vec<u64>,
    pub reps: u32,
}

impl BenchConfig {
    /// Powers-of-eight sweep from 8 bytes to 16 MiB, 20 repetitions,
    /// every kind, the active strategy only.
    pub fn default_sweep() -> BenchConfig {
        BenchConfig {
            kinds: BenchKind::ALL.to_vec(),
            strategies: vec![crate::datamover::active_copy_strategy()],
            sizes: vec![8, 64, 512, 4096, 32768, 262_144, 2_097_152, 16_777_216],
            reps: 20,
        }
    }
}

/// Times `op` as one repetition; returns ns per operation.
fn time_rep(nbytes: u64, op: &mut dyn FnMut()) -> f64 {
    if nbytes < BANDWIDTH_CUTOFF {
        let t0 = Instant::now();
        for _ in 0..LATENCY_LOOP {
            op();
        }
        t0.elapsed().as_nanos() as f64 / LATENCY_LOOP as f64
    } else {
        let t0 = Instant::now();
        op();
        t0.elapsed().as_nanos() as f64
    }
}

fn bandwidth_of(nbytes: u64, elapsed_ns: f64) -> Option<f64> {
    if nbytes >= BANDWIDTH_CUTOFF && elapsed_ns > 0.0 {
        Some(nbytes as f64 * 8.0 / elapsed_ns)
    } else {
        None
    }
}

fn measure(
    out: &mut Vec<BenchRecord>,
    kind: BenchKind,
    strategy: CopyStrategy,
    nbytes: u64,
    reps: u32,
    op: &mut dyn FnMut(),
) {
    let _ = time_rep(nbytes, op); // warmup, discarded
    for rep in 0..reps {
        let elapsed_ns = time_rep(nbytes, op);
        out.push(BenchRecord {
            kind,
            strategy,
            nbytes,
            rep,
            elapsed_ns,
            bandwidth_gbps: bandwidth_of(nbytes, elapsed_ns),
        });
    }
}

/// 16-byte-aligned private byte buffer, filled with a nonzero pattern so
/// every page is physically backed: an all-zero source would read from
/// the shared zero page and overstate copy speed.
struct AlignedBuf {
    storage: Vec<u128>,
}

const FILL_PATTERN: u128 = 0x5AA5_5AA5_5AA5_5AA5_5AA5_5AA5_5AA5_5AA5;

impl AlignedBuf {
    fn new(len: usize) -> AlignedBuf {
        AlignedBuf { storage: vec![FILL_PATTERN; len.div_ceil(16).max(1)] }
    }

    fn ptr(&mut self) -> *mut u8 {
        self.storage.as_mut_ptr() as *mut u8
    }
}

/// Local-copy sweep over private buffers; needs no runtime.
pub fn run_local(cfg: &BenchConfig) -> Vec<BenchRecord> {
    let max = cfg.sizes.iter().copied().max().unwrap_or(0) as usize;
    let mut src = AlignedBuf::new(max);
    let mut dst = AlignedBuf::new(max);
    let (sp, dp) = (src.ptr(), dst.ptr());
    let mut out = Vec::new();
    for &strategy in &cfg.strategies {
        for &nbytes in &cfg.sizes {
            let mut op = || unsafe { copy_with(strategy, dp, sp, nbytes as usize) };
            measure(&mut out, BenchKind::LocalCopy, strategy, nbytes, cfg.reps, &mut op);
        }
    }
    out
}

/// Full sweep inside a running job. Rank 0 measures; every other rank
/// walks the identical combination list and waits in the paired barriers,
/// so the target PE of put/get (rank 1) stays attached but passive: no
/// remote CPU is ever part of the data path.
pub fn run_with_world(w: &World, cfg: &BenchConfig) -> Result<Vec<BenchRecord>> {
    let needs_peer = cfg.kinds.iter().any(|k| *k != BenchKind::LocalCopy);
    if needs_peer && w.npes() < 2 {
        return Err(PoshError::BadConfig(
            "put/get measurements need at least 2 PEs".into(),
        ));
    }
    let max = cfg.sizes.iter().copied().max().unwrap_or(0);
    let sym = w.shmalloc(max.max(16))?;
    let mut local = AlignedBuf::new(max as usize);
    let lp = local.ptr();
    let mut out = Vec::new();
    let target = 1u32.min(w.npes() - 1);
    if w.rank() == 0 {
        // Materialize the peer's pages before timing: untouched segment
        // pages read as holes, which would bias get downward on its
        // first repetitions and put upward on fault-absorbing writes.
        let pattern = unsafe { std::slice::from_raw_parts(lp, max as usize) };
        w.put(target, sym, pattern)?;
    }

    for &strategy in &cfg.strategies {
        if w.rank() == 0 {
            select_copy_strategy(strategy);
        }
        for &kind in &cfg.kinds {
            for &nbytes in &cfg.sizes {
                w.barrier_all()?;
                if w.rank() == 0 {
                    match kind {
                        BenchKind::LocalCopy => {
                            let mut peer = AlignedBuf::new(nbytes as usize);
                            let pp = peer.ptr();
                            let mut op =
                                || unsafe { copy_with(strategy, pp, lp, nbytes as usize) };
                            measure(&mut out, kind, strategy, nbytes, cfg.reps, &mut op);
                        }
                        BenchKind::Put => {
                            let src =
                                unsafe { std::slice::from_raw_parts(lp, nbytes as usize) };
                            let mut op = || w.put(target, sym, src).unwrap();
                            measure(&mut out, kind, strategy, nbytes, cfg.reps, &mut op);
                        }
                        BenchKind::Get => {
                            let dst = unsafe {
                                std::slice::from_raw_parts_mut(lp, nbytes as usize)
                            };
                            let mut op = || w.get(target, sym, dst).unwrap();
                            measure(&mut out, kind, strategy, nbytes, cfg.reps, &mut op);
                        }
                    }
                }
                w.barrier_all()?;
            }
        }
    }
    w.shfree(sym)?;
    Ok(out)
}

/// Serializes records to CSV (stable header, shortest round-trip floats,
/// empty bandwidth field when absent).
pub fn emit_csv(records: &[BenchRecord]) -> String {
    let mut s = String::from(CSV_HEADER);
    s.push('\n');
    for r in records {
        let bw = r.bandwidth_gbps.map(|b| b.to_string()).unwrap_or_default();
        s.push_str(&format!(
            "{},{},{},{},{},{}\n",
            r.kind, r.strategy, r.nbytes, r.rep, r.elapsed_ns, bw
        ));
    }
    s
}

/// Parses what [`emit_csv`] wrote.
pub fn parse_csv(text: &str) -> Result<Vec<BenchRecord>> {
    let mut lines = text.lines();
    match lines.next() {
        Some(h) if h == CSV_HEADER => {}
        other => {
            return Err(PoshError::BadConfig(format!(
                "bad CSV header: {other:?} (expected {CSV_HEADER:?})"
            )))
        }
    }
    let mut out = Vec::new();
    for (i, line) in lines.enumerate() {
        if line.is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 6 {
            return Err(PoshError::BadConfig(format!(
                "CSV line {}: expected 6 fields, got {}",
                i + 2,
                f.len()
            )));
        }
        let bad = |what: &str| PoshError::BadConfig(format!("CSV line {}: bad {what}", i + 2));
        out.push(BenchRecord {
            kind: f[0].parse()?,
            strategy: f[1].parse()?,
            nbytes: f[2].parse().map_err(|_| bad("nbytes"))?,
            rep: f[3].parse().map_err(|_| bad("rep"))?,
            elapsed_ns: f[4].parse().map_err(|_| bad("elapsed_ns"))?,
            bandwidth_gbps: if f[5].is_empty() {
                None
            } else {
                Some(f[5].parse().map_err(|_| bad("bandwidth_gbps"))?)
            },
        });
    }
    Ok(out)
}

/// Median over a non-empty slice (mean of the middle pair when even).
pub fn median(values: &[f64]) -> f64 {
    debug_assert!(!values.is_empty());
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    }
}

/// Per-combination medians.
#[derive(Clone, Copy, Debug)]
pub struct Summary {
    pub kind: BenchKind,
    pub strategy: CopyStrategy,
    pub nbytes: u64,
    pub median_elapsed_ns: f64,
    pub median_bandwidth_gbps: Option<f64>,
}

pub fn summarize(records: &[BenchRecord]) -> Vec<Summary> {
    let mut groups: Vec<(BenchKind, CopyStrategy, u64)> = Vec::new();
    for r in records {
        let key = (r.kind, r.strategy, r.nbytes);
        if !groups.contains(&key) {
            groups.push(key);
        }
    }
    groups
        .into_iter()
        .map(|(kind, strategy, nbytes)| {
            let ns: Vec<f64> = records
                .iter()
                .filter(|r| (r.kind, r.strategy, r.nbytes) == (kind, strategy, nbytes))
                .map(|r| r.elapsed_ns)
                .collect();
            let med = median(&ns);
            Summary {
                kind,
                strategy,
                nbytes,
                median_elapsed_ns: med,
                median_bandwidth_gbps: bandwidth_of(nbytes, med),
            }
        })
        .collect()
}

/// Parses a byte size with an optional binary suffix: `4096`, `64K`,
/// `16M`, `1G` (case-insensitive, optional trailing `iB`/`B`).
pub fn parse_size(s: &str) -> Result<u64> {
    let t = s.trim();
    let lower = t.to_ascii_lowercase();
    let (digits, shift) = if let Some(p) = lower.strip_suffix("gib").or(lower.strip_suffix("g")) {
        (p, 30)
    } else if let Some(p) = lower.strip_suffix("mib").or(lower.strip_suffix("m")) {
        (p, 20)
    } else if let Some(p) = lower.strip_suffix("kib").or(lower.strip_suffix("k")) {
        (p, 10)
    } else if let Some(p) = lower.strip_suffix("b") {
        (p, 0)
    } else {
        (lower.as_str(), 0)
    };
    let n: u64 = digits
        .trim()
        .parse()
        .map_err(|_| PoshError::BadConfig(format!("bad size {s:?}")))?;
    n.checked_shl(shift)
        .filter(|v| v >> shift == n)
        .ok_or_else(|| PoshError::BadConfig(format!("size {s:?} overflows")))
}

fn human_size(n: u64) -> String {
    if n >= 1 << 20 && n % (1 << 20) == 0 {
        format!("{}MiB", n >> 20)
    } else if n >= 1 << 10 && n % (1 << 10) == 0 {
        format!("{}KiB", n >> 10)
    } else {
        format!("{n}B")
    }
}

/// Renders two aligned text tables: per-operation latency for every size,
/// then bandwidth for sizes that have one. Rows are sizes, columns are
/// kind/strategy pairs; the best cell of each row is starred.
pub fn emit_table(records: &[BenchRecord]) -> String {
    let sums = summarize(records);
    let mut cols: Vec<(BenchKind, CopyStrategy)> = Vec::new();
    let mut sizes: Vec<u64> = Vec::new();
    for s in &sums {
        if !cols.contains(&(s.kind, s.strategy)) {
            cols.push((s.kind, s.strategy));
        }
        if !sizes.contains(&s.nbytes) {
            sizes.push(s.nbytes);
        }
    }
    sizes.sort_unstable();
    let find = |k: BenchKind, st: CopyStrategy, n: u64| {
        sums.iter()
            .find(|s| (s.kind, s.strategy, s.nbytes) == (k, st, n))
    };

    let mut out = String::new();
    let render = |out: &mut String,
                  title: &str,
                  unit: &str,
                  rows: &[u64],
                  cell: &dyn Fn(BenchKind, CopyStrategy, u64) -> Option<f64>,
                  best_is_min: bool| {
        if rows.is_empty() {
            return;
        }
        out.push_str(&format!("{title} ({unit}, median of reps, * best per row)\n"));
        let headers: Vec<String> = std::iter::once("size".to_string())
            .chain(cols.iter().map(|(k, s)| format!("{}/{}", k.name(), s.name())))
            .collect();
        let mut grid: Vec<Vec<String>> = vec![headers];
        for &n in rows {
            let vals: Vec<Option<f64>> =
                cols.iter().map(|&(k, s)| cell(k, s, n)).collect();
            let best = vals
                .iter()
                .flatten()
                .copied()
                .reduce(|a, b| if best_is_min { a.min(b) } else { a.max(b) });
            let mut row = vec![human_size(n)];
            for v in vals {
                row.push(match v {
                    Some(x) => {
                        let star = if Some(x) == best { "*" } else { "" };
                        format!("{x:.3}{star}")
                    }
                    None => "-".to_string(),
                });
            }
            grid.push(row);
        }
        let widths: Vec<usize> = (0..grid[0].len())
            .map(|c| grid.iter().map(|r| r[c].len()).max().unwrap_or(0))
            .collect();
        for row in &grid {
            let line: Vec<String> = row
                .iter()
                .enumerate()
                .map(|(c, cell)| format!("{:>w$}", cell, w = widths[c]))
                .collect();
            out.push_str(&line.join("  "));
            out.push('\n');
        }
        out.push('\n');
    };

    render(
        &mut out,
        "latency",
        "us/op",
        &sizes,
        &|k, s, n| find(k, s, n).map(|x| x.median_elapsed_ns / 1000.0),
        true,
    );
    let bw_sizes: Vec<u64> = sizes
        .iter()
        .copied()
        .filter(|&n| n >= BANDWIDTH_CUTOFF)
        .collect();
    render(
        &mut out,
        "bandwidth",
        "Gbit/s",
        &bw_sizes,
        &|k, s, n| find(k, s, n).and_then(|x| x.median_bandwidth_gbps),
        false,
    );
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn kind_names_round_trip() {
        for k in BenchKind::ALL {
            assert_eq!(k.name().parse::<BenchKind>().unwrap(), k);
        }
        assert!("teleport".parse::<BenchKind>().is_err());
    }

    #[test]
    fn local_run_produces_full_grid() {
        let cfg = BenchConfig {
            kinds: vec![BenchKind::LocalCopy],
            strategies: vec![CopyStrategy::Default, CopyStrategy::ByteLoop],
            sizes: vec![64, BANDWIDTH_CUTOFF],
            reps: 3,
        };
        let recs = run_local(&cfg);
        assert_eq!(recs.len(), 2 * 2 * 3);
        for r in &recs {
            assert!(r.elapsed_ns > 0.0, "timer must resolve the K-loop");
            assert_eq!(r.bandwidth_gbps.is_some(), r.nbytes >= BANDWIDTH_CUTOFF);
        }
    }

    #[test]
    fn csv_round_trips_bit_exact() {
        let recs = vec![
            BenchRecord {
                kind: BenchKind::Put,
                strategy: CopyStrategy::WideBlock,
                nbytes: 8,
                rep: 0,
                elapsed_ns: 123.456789,
                bandwidth_gbps: None,
            },
            BenchRecord {
                kind: BenchKind::LocalCopy,
                strategy: CopyStrategy::Default,
                nbytes: 1 << 20,
                rep: 19,
                elapsed_ns: 98765.0,
                bandwidth_gbps: Some(1.0 / 3.0),
            },
        ];
        let text = emit_csv(&recs);
        assert!(text.starts_with(CSV_HEADER));
        let back = parse_csv(&text).unwrap();
        assert_eq!(back.len(), recs.len());
        for (a, b) in recs.iter().zip(&back) {
            assert_eq!(a.kind, b.kind);
            assert_eq!(a.strategy, b.strategy);
            assert_eq!(a.nbytes, b.nbytes);
            assert_eq!(a.rep, b.rep);
            assert_eq!(a.elapsed_ns.to_bits(), b.elapsed_ns.to_bits());
            assert_eq!(
                a.bandwidth_gbps.map(f64::to_bits),
                b.bandwidth_gbps.map(f64::to_bits)
            );
        }
        assert!(parse_csv("nope\n1,2,3").is_err());
    }

    #[test]
    fn median_is_order_free() {
        assert_eq!(median(&[3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(&[4.0, 1.0, 2.0, 3.0]), 2.5);
        assert_eq!(median(&[7.5]), 7.5);
    }

    #[test]
    fn summary_and_table_cover_all_groups() {
        let cfg = BenchConfig {
            kinds: vec![BenchKind::LocalCopy],
            strategies: vec![CopyStrategy::Default],
            sizes: vec![64, BANDWIDTH_CUTOFF],
            reps: 5,
        };
        let recs = run_local(&cfg);
        let sums = summarize(&recs);
        assert_eq!(sums.len(), 2);
        let table = emit_table(&recs);
        assert!(table.contains("latency"));
        assert!(table.contains("bandwidth"));
        assert!(table.contains('*'));
        assert!(table.contains("64KiB"));
    }

    #[test]
    fn size_parsing() {
        assert_eq!(parse_size("4096").unwrap(), 4096);
        assert_eq!(parse_size("64K").unwrap(), 64 << 10);
        assert_eq!(parse_size("64KiB").unwrap(), 64 << 10);
        assert_eq!(parse_size("16m").unwrap(), 16 << 20);
        assert_eq!(parse_size("2G").unwrap(), 2 << 30);
        assert_eq!(parse_size("512B").unwrap(), 512);
        assert!(parse_size("lots").is_err());
        assert!(parse_size("999999999999G").is_err());
    }

    #[test]
    fn human_sizes() {
        assert_eq!(human_size(8), "8B");
        assert_eq!(human_size(4096), "4KiB");
        assert_eq!(human_size(16 << 20), "16MiB");
        assert_eq!(human_size(1500), "1500B");
    }
}
