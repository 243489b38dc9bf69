//! Acceptance suite: one PASS/FAIL line per criterion.
//!
//! Runs the full desk-scale suite (about half an hour on one core). Set
//! `SIGVOL_ACCEPTANCE_QUICK=1` to skip the end-to-end experiments.

use std::process::ExitCode;

use sigvol::selftest::{run_all, Options};

fn main() -> ExitCode {
    let quick = std::env::var("SIGVOL_ACCEPTANCE_QUICK").is_ok_and(|v| v == "1");
    println!("acceptance suite{}", if quick { " (quick)" } else { "" });
    let report = run_all(&Options { quick, base: None, verbose: true });
    println!("{} criteria, {} failed", report.lines.len(), report.failed());
    if report.all_passed() {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
