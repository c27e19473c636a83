//! Finite-difference verification of every hand-written backward pass,
//! on a fresh model with the default configuration.
//!
//! cargo run --release --example grad_check

use sd4r::gradcheck::{run_all, STEP, TOLERANCE};
use sd4r::PipelineConfig;

fn main() -> sd4r::Result<()> {
    let cfg = PipelineConfig::default();
    let report = run_all(&cfg, None, 0, STEP, TOLERANCE)?;
    println!("{:<28} {:>12} {:>8} {:>8}", "check", "max rel err", "coords", "skipped");
    for r in &report.results {
        println!(
            "{:<28} {:>12.3e} {:>8} {:>8}  {}",
            r.name,
            r.max_rel_error,
            r.checked,
            r.skipped,
            if r.passed() { "ok" } else { "FAIL" }
        );
    }
    println!(
        "step {:e}, tolerance {:e}: {}",
        report.step,
        report.tolerance,
        if report.passed() { "all passed" } else { "FAILED" }
    );
    Ok(())
}
