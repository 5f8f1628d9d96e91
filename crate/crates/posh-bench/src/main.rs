//! Copy/put/get measurement tool.
//!
//! Standalone it measures local copies only. Under the launcher (as
//! `poshrun -n 2 -- posh-bench ...`) rank 0 additionally measures
//! one-sided put/get against rank 1, which stays passive: the paired
//! barriers around each combination are its only participation.

use std::process::ExitCode;
use std::str::FromStr;

use clap::Parser;
use posh::bench::{
    emit_csv, emit_table, parse_size, run_local, run_with_world, BenchConfig, BenchKind,
};
use posh::symheap::ENV_RANK;
use posh::{CopyStrategy, World};

#[derive(Parser)]
#[command(
    name = "posh-bench",
    about = "Measures local-copy, put, and get latency/bandwidth",
    after_help = "Standalone runs measure local copies only.\n\
                  For put/get run under the launcher: poshrun -n 2 -- posh-bench --kind all"
)]
struct Cli {
    /// What to measure: copy, put, get, or all.
    #[arg(long, default_value = "all", value_name = "KIND")]
    kind: String,

    /// Copy strategies to sweep (comma-separated), or "all".
    #[arg(long, default_value = "all", value_name = "LIST")]
    strategies: String,

    /// Transfer sizes (comma-separated, K/M/G suffixes accepted).
    #[arg(long, value_name = "LIST")]
    sizes: Option<String>,

    /// Timed repetitions per combination (one extra warmup is discarded).
    #[arg(long, default_value_t = 20, value_name = "N")]
    reps: u32,

    /// Write raw per-repetition records to this CSV file.
    #[arg(long, value_name = "PATH")]
    csv: Option<String>,
}

fn run(cli: Cli) -> Result<(), String> {
    let kinds: Vec<BenchKind> = match cli.kind.as_str() {
        "all" => BenchKind::ALL.to_vec(),
        "copy" | "localcopy" => vec![BenchKind::LocalCopy],
        other => vec![BenchKind::from_str(other).map_err(|e| e.to_string())?],
    };
    let strategies: Vec<CopyStrategy> = if cli.strategies == "all" {
        CopyStrategy::ALL.to_vec()
    } else {
        cli.strategies
            .split(',')
            .map(|s| CopyStrategy::from_str(s.trim()).map_err(|e| e.to_string()))
            .collect::<Result<_, _>>()?
    };
    let sizes: Vec<u64> = match &cli.sizes {
        Some(list) => list
            .split(',')
            .map(|s| parse_size(s).map_err(|e| e.to_string()))
            .collect::<Result<_, _>>()?,
        None => BenchConfig::default_sweep().sizes,
    };
    if sizes.is_empty() {
        return Err("no sizes selected".into());
    }
    let cfg = BenchConfig { kinds, strategies, sizes, reps: cli.reps };

    let in_job = std::env::var(ENV_RANK).is_ok();
    let needs_peer = cfg.kinds.iter().any(|k| *k != BenchKind::LocalCopy);
    let (records, emit) = if in_job {
        let w = World::init().map_err(|e| e.to_string())?;
        let records = run_with_world(&w, &cfg).map_err(|e| e.to_string())?;
        let emit = w.rank() == 0;
        w.finalize().map_err(|e| e.to_string())?;
        (records, emit)
    } else {
        if needs_peer {
            return Err(
                "put/get need a running job; use: poshrun -n 2 -- posh-bench --kind all \
                 (or --kind copy for a standalone local-copy run)"
                    .into(),
            );
        }
        (run_local(&cfg), true)
    };

    if !emit {
        return Ok(());
    }
    if let Some(path) = &cli.csv {
        std::fs::write(path, emit_csv(&records)).map_err(|e| format!("writing {path}: {e}"))?;
    }
    print!("{}", emit_table(&records));
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(msg) => {
            eprintln!("posh-bench: {msg}");
            ExitCode::FAILURE
        }
    }
}
