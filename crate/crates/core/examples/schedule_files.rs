//! Building, stretching and storing a schedule.
//!
//!     cargo run --example schedule_files -- /tmp/alpha.csv

use std::path::PathBuf;

use distpro::losses::{normalize_alpha, Normalization};
use distpro::schedule::Schedule;

fn main() -> distpro::Result<()> {
    let path = std::env::args()
        .nth(1)
        .map(PathBuf::from)
        .unwrap_or_else(|| std::env::temp_dir().join("alpha.csv"));
    let ids: Vec<String> = ["t0-s0-k0", "t0-s1-k0", "t1-s1-k0"].iter().map(|s| s.to_string()).collect();

    // three pathways whose raw weights drift apart over five steps
    let mut s = Schedule::empty(ids.clone())?;
    for t in 0..5 {
        let raw = vec![1.0 + 0.2 * t as f64, 1.0, 1.0 - 0.15 * t as f64];
        let norm = normalize_alpha(&raw, Normalization::BiasedSoftmax, 1.0)?;
        s.push(norm, raw)?;
    }
    let long = s.interpolate(12)?;
    print!("{}", long.to_csv());
    println!("{}", long.summary_table());

    long.save(&path)?;
    let mut reversed = ids.clone();
    reversed.reverse();
    let back = Schedule::load_for(&path, &reversed)?;
    println!("saved {} and {}", path.display(), Schedule::raw_path(&path).display());
    println!("reloaded columns: {:?}", back.pathway_ids());
    assert_eq!(back.remap(&ids)?, long);
    Ok(())
}
