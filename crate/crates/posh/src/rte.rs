//! Runtime environment: spawns one OS process per PE, wires the rank
//! contract into each child's environment, supervises the job, and
//! guarantees the shared-memory segments are gone when the job is.
//!
//! Failure policy: the first child that exits nonzero or dies on a signal
//! gets the rest of the job terminated (SIGTERM, a short grace period,
//! then SIGKILL), because a PGAS job cannot make progress with a hole in
//! it. SIGINT/SIGTERM sent to the launcher are relayed to every child.

use std::collections::HashMap;
use std::io::{BufRead, BufReader, Write};
use std::os::unix::process::ExitStatusExt;
use std::process::{Child, Command, Stdio};
use std::sync::atomic::{AtomicI32, Ordering};
use std::sync::mpsc;
use std::thread;
use std::time::{Duration, Instant};

use crate::collectives;
use crate::error::PoshError;
use crate::layout::{segment_name, validate_jobid, Geometry};
use crate::shm;
use crate::symheap::{
    ENV_COLL_ALGO, ENV_DEBUG, ENV_DEBUG_HOLD_RANK, ENV_HEAP_SIZE, ENV_JOBID, ENV_NPES, ENV_RANK,
    ENV_SAFE,
};
use crate::Result;

pub use crate::symheap::release_debug_hold;

/// Everything needed to launch a job.
#[derive(Clone, Debug)]
pub struct JobSpec {
    pub npes: u32,
    pub program: String,
    pub args: Vec<String>,
    /// Per-PE segment bytes; `None` keeps the runtime default.
    pub heap_bytes: Option<u64>,
    /// Prefix each child's stdout/stderr lines with `[rank] `.
    pub capture_io: bool,
    /// Rank held at init until released (debugger attach window).
    pub debug_hold: Option<u32>,
    /// Collective algorithm selection, e.g. `"bcast=linear-put"`.
    pub coll_algo: Option<String>,
    /// Force safe mode on/off; `None` leaves the inherited setting.
    pub safe: Option<bool>,
    pub debug: bool,
    /// Extra environment for every child, applied last.
    pub env_extra: Vec<(String, String)>,
    /// Kill the job if it runs longer than this.
    pub timeout: Option<Duration>,
    /// Fixed job id; `None` generates a fresh one.
    pub jobid: Option<String>,
}

impl JobSpec {
    pub fn new(npes: u32, program: impl Into<String>) -> JobSpec {
        JobSpec {
            npes,
            program: program.into(),
            args: Vec::new(),
            heap_bytes: None,
            capture_io: false,
            debug_hold: None,
            coll_algo: None,
            safe: None,
            debug: false,
            env_extra: Vec::new(),
            timeout: None,
            jobid: None,
        }
    }
}

/// How one child ended.
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum ChildStatus {
    Exited(i32),
    Signaled(i32),
}

impl ChildStatus {
    pub fn success(self) -> bool {
        self == ChildStatus::Exited(0)
    }
}

impl std::fmt::Display for ChildStatus {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            ChildStatus::Exited(c) => write!(f, "exited {c}"),
            ChildStatus::Signaled(s) => write!(f, "killed by signal {s}"),
        }
    }
}

#[derive(Clone, Debug)]
pub struct ChildRecord {
    pub rank: u32,
    pub pid: i32,
    pub status: ChildStatus,
}

/// Outcome of a whole job.
#[derive(Clone, Debug)]
pub struct JobReport {
    pub jobid: String,
    /// 0 all ranks exited 0; 1 some rank failed; 2 launcher-level failure
    /// (currently: watchdog timeout).
    pub exit_code: i32,
    pub timed_out: bool,
    pub children: Vec<ChildRecord>,
}

/// Last signal relayed to the launcher, consumed by the supervision loop.
static RELAY_SIGNAL: AtomicI32 = AtomicI32::new(0);

extern "C" fn note_signal(sig: libc::c_int) {
    RELAY_SIGNAL.store(sig, Ordering::Relaxed);
}

struct SignalRelay {
    saved: [(libc::c_int, libc::sigaction); 2],
}

impl SignalRelay {
    fn install() -> SignalRelay {
        RELAY_SIGNAL.store(0, Ordering::Relaxed);
        let mut saved: [(libc::c_int, libc::sigaction); 2] =
            unsafe { [(libc::SIGINT, std::mem::zeroed()), (libc::SIGTERM, std::mem::zeroed())] };
        for (sig, slot) in saved.iter_mut() {
            let mut act: libc::sigaction = unsafe { std::mem::zeroed() };
            act.sa_sigaction = note_signal as *const () as usize;
            act.sa_flags = libc::SA_RESTART;
            unsafe { libc::sigaction(*sig, &act, slot) };
        }
        SignalRelay { saved }
    }

    fn pending(&self) -> Option<i32> {
        match RELAY_SIGNAL.swap(0, Ordering::Relaxed) {
            0 => None,
            s => Some(s),
        }
    }
}

impl Drop for SignalRelay {
    fn drop(&mut self) {
        for (sig, act) in &self.saved {
            unsafe { libc::sigaction(*sig, act, std::ptr::null_mut()) };
        }
    }
}

fn kill_pid(pid: i32, sig: libc::c_int) {
    // ESRCH just means the child is already gone.
    unsafe { libc::kill(pid, sig) };
}

fn generate_jobid() -> String {
    let nanos = std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .map(|d| d.subsec_nanos())
        .unwrap_or(0);
    format!("{:x}-{:x}", std::process::id(), nanos)
}

/// Removes every segment the job may have left behind. Idempotent.
pub fn sweep_segments(jobid: &str, npes: u32) {
    for rank in 0..npes {
        let _ = shm::unlink_name(&segment_name(jobid, rank));
    }
}

fn spawn_capture(
    rank: u32,
    reader: impl std::io::Read + Send + 'static,
    to_stderr: bool,
) -> thread::JoinHandle<()> {
    thread::spawn(move || {
        let buf = BufReader::new(reader);
        for line in buf.lines() {
            let Ok(line) = line else { break };
            if to_stderr {
                let err = std::io::stderr();
                let _ = writeln!(err.lock(), "[{rank}] {line}");
            } else {
                let out = std::io::stdout();
                let _ = writeln!(out.lock(), "[{rank}] {line}");
            }
        }
    })
}

/// Launches `spec.npes` copies of the program, each with the rank
/// contract in its environment, and supervises them to completion.
pub fn launch(spec: &JobSpec) -> Result<JobReport> {
    if spec.npes == 0 {
        return Err(PoshError::BadConfig("a job needs at least one PE".into()));
    }
    if spec.program.is_empty() {
        return Err(PoshError::BadConfig("empty program path".into()));
    }
    if let Some(h) = spec.heap_bytes {
        // Fail fast in the launcher instead of npes times in children.
        Geometry::for_capacity(h)?;
    }
    let jobid = match &spec.jobid {
        Some(j) => {
            validate_jobid(j)?;
            j.clone()
        }
        None => generate_jobid(),
    };
    // Resolve here and export the result so every child agrees and none
    // prints the unselected-default warning.
    let (balgo, ralgo) = collectives::resolve_algorithms(spec.coll_algo.as_deref(), false)?;
    let algo = collectives::algo_string(balgo, ralgo);

    let relay = SignalRelay::install();
    let mut children: Vec<(u32, Child)> = Vec::with_capacity(spec.npes as usize);
    let mut capture_threads = Vec::new();

    for rank in 0..spec.npes {
        let mut cmd = Command::new(&spec.program);
        cmd.args(&spec.args)
            .env(ENV_RANK, rank.to_string())
            .env(ENV_NPES, spec.npes.to_string())
            .env(ENV_JOBID, &jobid)
            .env(ENV_COLL_ALGO, &algo);
        if let Some(h) = spec.heap_bytes {
            cmd.env(ENV_HEAP_SIZE, h.to_string());
        }
        if let Some(s) = spec.safe {
            cmd.env(ENV_SAFE, if s { "1" } else { "0" });
        }
        if spec.debug {
            cmd.env(ENV_DEBUG, "1");
        }
        if let Some(r) = spec.debug_hold {
            cmd.env(ENV_DEBUG_HOLD_RANK, r.to_string());
        }
        for (k, v) in &spec.env_extra {
            cmd.env(k, v);
        }
        // Only rank 0 reads the terminal; the rest see closed stdin.
        cmd.stdin(if rank == 0 { Stdio::inherit() } else { Stdio::null() });
        if spec.capture_io {
            cmd.stdout(Stdio::piped()).stderr(Stdio::piped());
        }
        match cmd.spawn() {
            Ok(mut child) => {
                if spec.capture_io {
                    if let Some(out) = child.stdout.take() {
                        capture_threads.push(spawn_capture(rank, out, false));
                    }
                    if let Some(err) = child.stderr.take() {
                        capture_threads.push(spawn_capture(rank, err, true));
                    }
                }
                children.push((rank, child));
            }
            Err(e) => {
                for (_, c) in children.iter_mut() {
                    kill_pid(c.id() as i32, libc::SIGKILL);
                    let _ = c.wait();
                }
                for t in capture_threads {
                    let _ = t.join();
                }
                sweep_segments(&jobid, spec.npes);
                return Err(PoshError::Launch(format!(
                    "spawning rank {rank} ({}): {e}",
                    spec.program
                )));
            }
        }
    }

    let pids: HashMap<u32, i32> = children.iter().map(|(r, c)| (*r, c.id() as i32)).collect();
    let (tx, rx) = mpsc::channel::<(u32, std::process::ExitStatus)>();
    for (rank, mut child) in children {
        let txc = tx.clone();
        thread::spawn(move || {
            if let Ok(st) = child.wait() {
                let _ = txc.send((rank, st));
            }
        });
    }
    drop(tx);

    let deadline = spec.timeout.map(|t| Instant::now() + t);
    let mut status: HashMap<u32, ChildStatus> = HashMap::new();
    let mut term_sent: Option<Instant> = None;
    let mut killed = false;
    let mut timed_out = false;

    let kill_survivors = |status: &HashMap<u32, ChildStatus>, sig: libc::c_int| {
        for (rank, pid) in &pids {
            if !status.contains_key(rank) {
                kill_pid(*pid, sig);
            }
        }
    };

    while status.len() < spec.npes as usize {
        match rx.recv_timeout(Duration::from_millis(50)) {
            Ok((rank, st)) => {
                let cs = match st.code() {
                    Some(c) => ChildStatus::Exited(c),
                    None => ChildStatus::Signaled(st.signal().unwrap_or(0)),
                };
                status.insert(rank, cs);
                if !cs.success() && term_sent.is_none() {
                    // One PE down, the job cannot complete: stop the rest.
                    kill_survivors(&status, libc::SIGTERM);
                    term_sent = Some(Instant::now());
                }
            }
            Err(mpsc::RecvTimeoutError::Timeout) => {}
            Err(mpsc::RecvTimeoutError::Disconnected) => break,
        }
        if let Some(sig) = relay.pending() {
            kill_survivors(&status, sig);
            if term_sent.is_none() {
                term_sent = Some(Instant::now());
            }
        }
        if let Some(d) = deadline {
            if !timed_out && Instant::now() >= d {
                timed_out = true;
                eprintln!("poshrun: job {jobid} exceeded its time limit, terminating");
                kill_survivors(&status, libc::SIGTERM);
                term_sent = Some(Instant::now());
            }
        }
        if let (Some(t), false) = (term_sent, killed) {
            if t.elapsed() >= Duration::from_millis(500) {
                kill_survivors(&status, libc::SIGKILL);
                killed = true;
            }
        }
    }

    for t in capture_threads {
        let _ = t.join();
    }
    // The job is gone; its names must be too, whatever path got us here.
    sweep_segments(&jobid, spec.npes);

    let mut records: Vec<ChildRecord> = status
        .iter()
        .map(|(&rank, &st)| ChildRecord { rank, pid: pids[&rank], status: st })
        .collect();
    records.sort_by_key(|r| r.rank);
    let exit_code = if timed_out {
        2
    } else if records.iter().all(|r| r.status.success()) {
        0
    } else {
        1
    };
    Ok(JobReport { jobid, exit_code, timed_out, children: records })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn job_spec_validation() {
        assert!(matches!(
            launch(&JobSpec::new(0, "/bin/true")),
            Err(PoshError::BadConfig(_))
        ));
        assert!(matches!(
            launch(&JobSpec::new(1, "")),
            Err(PoshError::BadConfig(_))
        ));
        let mut bad_heap = JobSpec::new(1, "/bin/true");
        bad_heap.heap_bytes = Some(1);
        assert!(launch(&bad_heap).is_err());
        let mut bad_job = JobSpec::new(1, "/bin/true");
        bad_job.jobid = Some("no/slashes".into());
        assert!(launch(&bad_job).is_err());
    }

    #[test]
    fn trivial_job_exits_clean() {
        let report = launch(&JobSpec::new(2, "/bin/true")).unwrap();
        assert_eq!(report.exit_code, 0);
        assert_eq!(report.children.len(), 2);
        assert!(report.children.iter().all(|c| c.status.success()));
        assert!(!report.timed_out);
    }

    #[test]
    fn failing_child_yields_one() {
        let report = launch(&JobSpec::new(2, "/bin/false")).unwrap();
        assert_eq!(report.exit_code, 1);
        assert!(report.children.iter().any(|c| c.status == ChildStatus::Exited(1)));
    }

    #[test]
    fn missing_program_is_launcher_error() {
        assert!(matches!(
            launch(&JobSpec::new(2, "/no/such/binary")),
            Err(PoshError::Launch(_))
        ));
    }

    #[test]
    fn watchdog_times_out_hung_job() {
        let mut spec = JobSpec::new(2, "/bin/sleep");
        spec.args = vec!["30".into()];
        spec.timeout = Some(Duration::from_millis(300));
        let t0 = Instant::now();
        let report = launch(&spec).unwrap();
        assert!(report.timed_out);
        assert_eq!(report.exit_code, 2);
        assert!(t0.elapsed() < Duration::from_secs(10));
    }

    #[test]
    fn jobids_are_unique_enough() {
        let a = generate_jobid();
        std::thread::sleep(Duration::from_millis(2));
        let b = generate_jobid();
        assert_ne!(a, b);
        validate_jobid(&a).unwrap();
    }
}
