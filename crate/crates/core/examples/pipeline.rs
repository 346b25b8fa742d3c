//! Drives the same subcommands as the `distpro` binary through the library.
//!
//!     cargo run --release --example pipeline -- run-dir

use distpro::workflow::{self, Layout, RunConfig};

fn main() -> distpro::Result<()> {
    let root = std::env::args().nth(1).unwrap_or_else(|| "pipeline-run".into());
    let mut cfg = RunConfig::default();
    cfg.apply_overrides(&[
        "data.n=512".into(),
        "data.eval_n=256".into(),
        "teacher.channels=8,16".into(),
        "student.channels=4,8".into(),
        "teacher.epochs=2".into(),
        "search.steps=20".into(),
        "retrain.steps=60".into(),
    ])?;
    let layout = Layout::new(&root);
    for cmd in ["gen-data", "pretrain", "search", "retrain", "eval", "export-schedule"] {
        let summary = workflow::run(cmd, &cfg, &layout)?;
        println!("== {cmd}");
        for line in summary.lines {
            println!("{line}");
        }
    }
    Ok(())
}
