//! How many pathway losses clipping skips during a short retrain.
//!
//!     cargo run --release --example clipping_cost

use distpro::losses::{normalize_alpha, LossSpec, Normalization};
use distpro::retrain::{retrain, Guidance, RetrainConfig};
use distpro::schedule::Schedule;
use distpro::workflow::RunConfig;

fn main() -> distpro::Result<()> {
    let mut cfg = RunConfig::default();
    cfg.apply_overrides(&["data.n=256".into(), "teacher.channels=8,16".into(), "student.channels=4,8".into()])?;
    let (train, eval) = cfg.datasets()?;
    let teacher = distpro::networks::Network::build(cfg.teacher_spec(&train), 0, distpro::rng::Stream::TeacherInit)?;
    let student = cfg.fresh_student(&train)?;
    let p = student.pathways.len();
    let steps = 20;

    for active in [p, p / 2, p / 4, 0] {
        let raw: Vec<f64> = (0..p).map(|i| if i < active { 1.0 } else { 0.2 }).collect();
        let norm = normalize_alpha(&raw, Normalization::BiasedSoftmax, 1.0)?;
        let s = Schedule::new(student.pathways.ids(), vec![norm; steps], vec![raw; steps])?;
        let rc = RetrainConfig {
            steps,
            batch_size: 32,
            loss: LossSpec::default(),
            ..RetrainConfig::default()
        };
        let start = std::time::Instant::now();
        let (_, report) = retrain(Guidance::Schedule(&s), &train, &eval, &teacher, student.clone(), &rc)?;
        println!(
            "active {active:>2}/{p}: evaluated {:>3} skipped {:>3} teacher forwards {:>2} time {:?}",
            report.pathway.evaluated,
            report.pathway.skipped,
            report.teacher_forwards,
            start.elapsed()
        );
    }
    Ok(())
}
