//! End-to-end checks of the poshrun CLI against /bin/sh children: env
//! contract, IO prefixing, exit-code mapping, teardown, and the
//! timeout and signal paths.

use std::process::{Command, Output, Stdio};
use std::time::{Duration, Instant};

const POSHRUN: &str = env!("CARGO_BIN_EXE_poshrun");

fn run(args: &[&str]) -> Output {
    Command::new(POSHRUN)
        .args(args)
        .stdin(Stdio::null())
        .output()
        .expect("spawn poshrun")
}

fn stdout_of(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn stderr_of(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

#[test]
fn hello_lines_are_rank_prefixed() {
    let out = run(&[
        "-n",
        "3",
        "--capture-io",
        "--",
        "/bin/sh",
        "-c",
        "echo hello from rank $POSH_RANK",
    ]);
    assert_eq!(out.status.code(), Some(0), "stderr: {}", stderr_of(&out));
    let text = stdout_of(&out);
    for r in 0..3 {
        assert!(
            text.contains(&format!("[{r}] hello from rank {r}")),
            "missing line for rank {r} in:\n{text}"
        );
    }
}

#[test]
fn rank_env_contract() {
    // Every rank sees its rank, the PE count, a jobid, and the heap size.
    let script = r#"
        [ -n "$POSH_RANK" ] || exit 1
        [ "$POSH_NPES" = 2 ] || exit 2
        [ -n "$POSH_JOBID" ] || exit 3
        [ "$POSH_HEAP_SIZE" = 33554432 ] || exit 4
    "#;
    let out = run(&["-n", "2", "--heap", "32M", "--", "/bin/sh", "-c", script]);
    assert_eq!(out.status.code(), Some(0), "stderr: {}", stderr_of(&out));
}

#[test]
fn failing_rank_fails_job() {
    let t0 = Instant::now();
    let out = run(&[
        "-n",
        "2",
        "--capture-io",
        "--",
        "/bin/sh",
        "-c",
        r#"if [ "$POSH_RANK" = 1 ]; then exit 5; fi
           trap "exit 0" TERM
           while :; do sleep 0.1; done"#,
    ]);
    assert_eq!(out.status.code(), Some(1));
    assert!(
        stderr_of(&out).contains("rank 1"),
        "stderr does not name the failed rank: {}",
        stderr_of(&out)
    );
    assert!(t0.elapsed() < Duration::from_secs(30), "teardown too slow");
}

#[test]
fn peers_get_term_on_failure() {
    // When one rank dies the survivor is told to stop, and its orderly
    // exit is still visible through the captured output.
    let out = run(&[
        "-n",
        "2",
        "--capture-io",
        "--",
        "/bin/sh",
        "-c",
        r#"if [ "$POSH_RANK" = 0 ]; then exit 9; fi
           trap "echo rank $POSH_RANK stopped; exit 0" TERM
           while :; do sleep 0.1; done"#,
    ]);
    assert_eq!(out.status.code(), Some(1));
    assert!(
        stdout_of(&out).contains("[1] rank 1 stopped"),
        "survivor did not run its TERM handler:\n{}",
        stdout_of(&out)
    );
}

#[test]
fn timeout_kills_job() {
    let t0 = Instant::now();
    // exec keeps the sleep in the launched pid itself, so the TERM from
    // the watchdog reaches it and no orphan holds our output pipe open.
    let out = run(&[
        "-n", "2", "--timeout", "1", "--", "/bin/sh", "-c", "exec sleep 600",
    ]);
    assert_eq!(out.status.code(), Some(2));
    assert!(
        stderr_of(&out).contains("time limit"),
        "stderr: {}",
        stderr_of(&out)
    );
    assert!(t0.elapsed() < Duration::from_secs(10), "watchdog too slow");
}

#[test]
fn sigterm_is_relayed_for_orderly_shutdown() {
    let child = Command::new(POSHRUN)
        .args([
            "-n",
            "2",
            "--capture-io",
            "--",
            "/bin/sh",
            "-c",
            r#"trap "echo rank $POSH_RANK done; exit 0" TERM
               while :; do sleep 0.1; done"#,
        ])
        .stdin(Stdio::null())
        .stdout(Stdio::piped())
        .stderr(Stdio::piped())
        .spawn()
        .expect("spawn poshrun");
    std::thread::sleep(Duration::from_millis(400));
    unsafe { libc::kill(child.id() as i32, libc::SIGTERM) };
    let out = child.wait_with_output().expect("wait poshrun");
    // Both ranks caught the relayed TERM and exited 0, so the job is a
    // clean shutdown, not a failure.
    assert_eq!(out.status.code(), Some(0), "stderr: {}", stderr_of(&out));
    let text = stdout_of(&out);
    for r in 0..2 {
        assert!(
            text.contains(&format!("[{r}] rank {r} done")),
            "rank {r} handler output missing:\n{text}"
        );
    }
}

#[test]
fn bad_usage_exits_2() {
    let out = run(&["-n", "0", "--", "/bin/true"]);
    assert_eq!(out.status.code(), Some(2), "npes 0 must be rejected");
    let out = run(&["--", "/bin/true"]);
    assert_eq!(out.status.code(), Some(2), "missing -n must be rejected");
}
