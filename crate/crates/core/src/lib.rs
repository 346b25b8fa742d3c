//! Search for per-step knowledge-distillation schedules.
//!
//! A teacher and a student network expose intermediate feature maps ("taps").
//! Every (teacher tap, student tap, transform) triple is a distillation
//! pathway with its own importance weight. The weights are learned as a
//! sequence over training steps by a bilevel meta-optimizer that descends a
//! finite-difference hypergradient of the validation loss, then a fresh
//! student is retrained under the recorded and interpolated schedule.
//!
//! Module map:
//!
//! - [`autodiff`]: dense float64 tensors and reverse-mode differentiation
//! - [`networks`]: small CNNs with feature taps, checkpoints, pretraining
//! - [`pathways`]: pathway enumeration and transform blocks
//! - [`losses`]: weight normalization, the weighted train loss, clipping
//! - [`meta_search`]: the hypergradient and the search loop
//! - [`schedule`]: schedule storage, interpolation and CSV files
//! - [`retrain`]: training a fresh student under a schedule
//! - [`data`]: datasets, splitting, the synthetic task, `DPDS` files
//! - [`oracle`]: brute-force references used to validate the above
//! - [`workflow`]: the run configuration and the end-to-end subcommands
//!
//! Runnable walkthroughs live in the crate's `examples/` directory.

pub mod autodiff;
pub mod data;
mod error;
pub mod losses;
pub mod meta_search;
pub mod networks;
pub mod optim;
pub mod oracle;
pub mod pathways;
pub mod retrain;
pub mod rng;
pub mod schedule;
pub mod workflow;

pub use error::{Error, Result};
