//! Smallest end-to-end run: synthetic data, a pretrained teacher, a short
//! schedule search, and three retrained students compared on held-out data.
//!
//!     cargo run --release --example quickstart

use distpro::retrain;
use distpro::workflow::{stages, RunConfig};

fn main() -> distpro::Result<()> {
    let mut cfg = RunConfig::default();
    cfg.apply_overrides(&[
        "data.n=1024".into(),
        "data.noise=0.8".into(),
        "teacher.channels=8,16".into(),
        "teacher.epochs=4".into(),
        "student.channels=4,8".into(),
        "student.subset=128".into(),
        "search.steps=40".into(),
        "search.gamma=30".into(),
        "retrain.steps=200".into(),
        "retrain.lr=0.1".into(),
    ])?;

    let (train, eval) = cfg.datasets()?;
    let (teacher, _) = stages::pretrain_teacher(&cfg, &train)?;
    println!("teacher accuracy {:.3}", retrain::evaluate(&teacher, &eval)?.0);

    let out = stages::search(&cfg, &train, &teacher)?;
    println!("{}", out.schedule.summary_table());

    let searched = out.schedule.interpolate(cfg.retrain.steps)?;
    let equal = stages::equal_schedule(&cfg, &cfg.fresh_student(&train)?)?;
    for (name, s) in [("none", None), ("equal", Some(&equal)), ("searched", Some(&searched))] {
        let (_, report) = stages::retrain(&cfg, s, &train, &eval, &teacher)?;
        println!("{name:>9}: accuracy {:.3}", report.accuracy);
    }
    Ok(())
}
