//! Runs a sweep config (by default the bundled step-count sweep) and prints
//! the per-cell transport errors. Cells run in parallel when cores allow.
//!
//!     cargo run --release --example step_sweep -- [config.toml] [out dir]

use std::path::PathBuf;

use bidpm::cli::cmd_sweep;

fn main() -> bidpm::Result<()> {
    let mut args = std::env::args().skip(1);
    let config = args
        .next()
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("examples/configs/step_sweep.toml"));
    let out = args
        .next()
        .map(PathBuf::from)
        .unwrap_or_else(|| std::env::temp_dir().join(format!("bidpm-sweep-{}", std::process::id())));
    let outcome = cmd_sweep(&config, Some(&out), None)?;

    println!("run      N   rho    method  fwd err  bwd err");
    for (run, result) in &outcome.runs {
        match result {
            Ok(r) => println!(
                "{}  {:>2}  {:<5}  {:<6}  {:.4}   {:.4}",
                run.label(),
                run.grid_steps,
                run.paired_fraction,
                run.method,
                r.forward.mean,
                r.backward.mean
            ),
            Err(e) => println!("{}  failed: {e}", run.label()),
        }
    }
    for v in &outcome.trend_violations {
        println!("trend: {v}");
    }
    println!("results in {}", out.join("sweep.csv").display());
    Ok(())
}
