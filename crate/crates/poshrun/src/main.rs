//! Job launcher: starts one process per PE with the rank contract in its
//! environment, relays signals, enforces all-or-nothing completion, and
//! removes the job's shared-memory segments on every exit path.
//!
//! Exit code: 0 when every rank exits 0, 1 when any rank fails or dies on
//! a signal, 2 for launcher-level errors (bad usage, spawn failure).

use std::process::ExitCode;

use clap::Parser;
use posh::bench::parse_size;
use posh::rte::{launch, JobSpec};

#[derive(Parser)]
#[command(
    name = "poshrun",
    about = "Runs an N-process job over a shared symmetric heap",
    after_help = "Everything after `--` is the program and its arguments.\n\
                  Example: poshrun -n 4 --heap 128M -- ./app --iters 100"
)]
struct Cli {
    /// Number of processing elements (one OS process each).
    #[arg(short = 'n', long = "npes", value_name = "NPES")]
    npes: u32,

    /// Per-PE segment size in bytes (K/M/G suffixes accepted).
    #[arg(long, value_name = "BYTES", value_parser = parse_size)]
    heap: Option<u64>,

    /// Prefix every child output line with its rank.
    #[arg(long)]
    capture_io: bool,

    /// Pause this rank during init until released (debugger attach).
    #[arg(long, value_name = "RANK")]
    debug_hold: Option<u32>,

    /// Collective algorithms, e.g. "bcast=linear-put,reduce=linear-gather".
    #[arg(long, value_name = "ALGO")]
    coll: Option<String>,

    /// Job time limit in seconds; on expiry the job is killed (exit 2).
    #[arg(long, value_name = "SECS")]
    timeout: Option<u64>,

    /// Program to run, then its arguments.
    #[arg(
        trailing_var_arg = true,
        allow_hyphen_values = true,
        required = true,
        value_name = "PROGRAM [ARGS]..."
    )]
    program: Vec<String>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let mut spec = JobSpec::new(cli.npes, cli.program[0].clone());
    spec.args = cli.program[1..].to_vec();
    spec.heap_bytes = cli.heap;
    spec.capture_io = cli.capture_io;
    spec.debug_hold = cli.debug_hold;
    spec.coll_algo = cli.coll;
    spec.timeout = cli.timeout.map(std::time::Duration::from_secs);

    match launch(&spec) {
        Ok(report) => {
            if report.exit_code != 0 {
                for c in &report.children {
                    if !c.status.success() {
                        eprintln!("poshrun: rank {} (pid {}): {}", c.rank, c.pid, c.status);
                    }
                }
            }
            ExitCode::from(report.exit_code as u8)
        }
        Err(e) => {
            eprintln!("poshrun: {e}");
            ExitCode::from(2)
        }
    }
}
