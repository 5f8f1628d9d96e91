//! Standalone CLI checks: local-copy sweeps work without a job, the
//! CSV matches the sweep shape, and put/get refuse to run solo.

use std::process::{Command, Output, Stdio};

use posh::bench::parse_csv;

const BENCH: &str = env!("CARGO_BIN_EXE_posh-bench");

fn run(args: &[&str]) -> Output {
    Command::new(BENCH)
        .args(args)
        .stdin(Stdio::null())
        .output()
        .expect("spawn posh-bench")
}

#[test]
fn local_copy_sweep_emits_table_and_csv() {
    let dir = tempfile::tempdir().unwrap();
    let csv = dir.path().join("out.csv");
    let out = run(&[
        "--kind",
        "copy",
        "--strategies",
        "all",
        "--sizes",
        "4K,64K",
        "--reps",
        "3",
        "--csv",
        csv.to_str().unwrap(),
    ]);
    assert_eq!(
        out.status.code(),
        Some(0),
        "stderr: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    let table = String::from_utf8_lossy(&out.stdout);
    assert!(table.contains("localcopy"), "table missing kind:\n{table}");
    let recs = parse_csv(&std::fs::read_to_string(&csv).unwrap()).unwrap();
    // 1 kind x 3 strategies x 2 sizes x 3 reps.
    assert_eq!(recs.len(), 18, "unexpected record count");
    assert!(recs.iter().all(|r| r.nbytes == 4096 || r.nbytes == 65536));
    assert!(recs.iter().all(|r| r.elapsed_ns > 0.0));
}

#[test]
fn put_needs_a_job() {
    let out = run(&["--kind", "put", "--sizes", "4K", "--reps", "1"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(
        String::from_utf8_lossy(&out.stderr).contains("poshrun"),
        "error should point at the launcher"
    );
}

#[test]
fn garbage_arguments_are_rejected() {
    let out = run(&["--kind", "teleport"]);
    assert_eq!(out.status.code(), Some(1));
    let out = run(&["--sizes", "12Q"]);
    assert_eq!(out.status.code(), Some(1), "bad size values are rejected");
}
