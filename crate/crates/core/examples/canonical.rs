//! Run the canonical experiment for a few seeds and print the headline numbers.
//!
//! ```text
//! cargo run --release --example canonical -- <out-dir> [first-seed] [count]
//! ```

use std::path::PathBuf;

use acorl::config::ExperimentConfig;
use acorl::experiment::run_canonical;

fn main() -> acorl::Result<()> {
    let mut args = std::env::args().skip(1);
    let out = PathBuf::from(args.next().unwrap_or_else(|| "canonical-runs".into()));
    let first: u64 = args.next().and_then(|s| s.parse().ok()).unwrap_or(0);
    let count: u64 = args.next().and_then(|s| s.parse().ok()).unwrap_or(1);
    let cfg = ExperimentConfig::canonical();
    for seed in first..first + count {
        let outcome = run_canonical(&cfg, seed, &out.join(format!("seed-{seed}")), true)?;
        println!("{}", serde_json::to_string(&outcome).expect("serializable"));
    }
    Ok(())
}
