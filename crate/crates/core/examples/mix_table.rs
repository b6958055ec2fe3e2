//! Prints real/synthetic sample counts for fill and extension mixes over a
//! pool of 19,130 real scans.

use voxdiff::semseg::{mix_datasets, MixSpec};

fn main() -> voxdiff::Result<()> {
    let real: Vec<String> = (0..19130).map(|i| format!("real_{i:05}")).collect();
    let synth: Vec<String> = (0..40000).map(|i| format!("synth_{i:05}")).collect();
    let mut specs: Vec<MixSpec> = [0.1, 0.25, 0.5, 0.9, 1.0].into_iter().map(|f| MixSpec::fill(f, "synthetic")).collect();
    specs.extend([0.25, 0.5, 0.75, 1.0].into_iter().map(|e| MixSpec::extend(1.0, e, "synthetic")));
    println!("{:<10} {:>7} {:>7} {:>7}", "cell", "real", "synth", "total");
    for spec in &specs {
        let mix = mix_datasets(&real, &synth, spec, 0)?;
        println!("{:<10} {:>7} {:>7} {:>7}", spec.label(), mix.real, mix.synthetic, mix.entries.len());
    }
    Ok(())
}
