//! Per-stage decoder feature memory and forward time, pruned against
//! unpruned, on slab scenes at 10% occupancy.
//!
//! Usage: bench_pruning [size ...]

use voxdiff::bench::{bench_pruning, bench_text, BenchConfig};

fn main() -> voxdiff::Result<()> {
    let mut sizes: Vec<usize> = std::env::args().skip(1).map(|a| a.parse().expect("numeric size")).collect();
    if sizes.is_empty() {
        sizes = vec![32, 64];
    }
    let rows = bench_pruning(&sizes, &BenchConfig::default())?;
    print!("{}", bench_text(&rows));
    Ok(())
}
