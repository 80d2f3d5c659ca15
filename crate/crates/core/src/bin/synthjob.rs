//! Synthetic job used as a profiling fixture.
//!
//! Reads the size of its input file, allocates and touches
//! `slope * size + intercept + quadratic * size^2` bytes (or a fixed
//! `--hold-mib`), keeps them resident, and sleeps for
//! `--hold-secs + --secs-per-mib * size_in_mib` before exiting.

use std::time::Duration;

use clap::Parser;

#[derive(Parser)]
struct Args {
    /// Input sample; only its size is used
    #[arg(long)]
    input: Option<std::path::PathBuf>,
    /// Fixed allocation, overrides the size-based formula
    #[arg(long)]
    hold_mib: Option<u64>,
    #[arg(long, default_value_t = 0.0)]
    slope: f64,
    #[arg(long, default_value_t = 0.0)]
    intercept_mib: f64,
    /// Coefficient on input_bytes^2 / 1 MiB
    #[arg(long, default_value_t = 0.0)]
    quadratic: f64,
    #[arg(long, default_value_t = 0.0)]
    hold_secs: f64,
    #[arg(long, default_value_t = 0.0)]
    secs_per_mib: f64,
    #[arg(long, default_value_t = 0)]
    exit_code: i32,
}

const MIB: f64 = 1024.0 * 1024.0;

fn main() {
    let args = Args::parse();
    let input_bytes = args
        .input
        .as_ref()
        .map(|p| std::fs::metadata(p).expect("input readable").len())
        .unwrap_or(0) as f64;
    let alloc = match args.hold_mib {
        Some(m) => m as f64 * MIB,
        None => {
            args.slope * input_bytes
                + args.intercept_mib * MIB
                + args.quadratic * input_bytes * input_bytes / MIB
        }
    }
    .max(0.0) as usize;

    // vec! with a non-zero fill writes every page
    let block = vec![1u8; alloc];
    let secs = args.hold_secs + args.secs_per_mib * input_bytes / MIB;
    std::thread::sleep(Duration::from_secs_f64(secs));
    std::hint::black_box(&block);
    drop(block);
    std::process::exit(args.exit_code);
}
