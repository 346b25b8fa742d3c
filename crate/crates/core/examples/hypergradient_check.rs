//! The finite-difference hypergradient against references: a closed-form
//! quadratic, then a brute-force central difference on a small CNN pair,
//! swept over the perturbation size.
//!
//!     cargo run --release --example hypergradient_check

use distpro::autodiff::Tensor;
use distpro::meta_search::{hypergradient, BilevelProblem, DistillProblem, EpsilonMode, SearchConfig};
use distpro::optim::ParamVec;
use distpro::oracle::{self, OracleReport};
use distpro::workflow::RunConfig;

/// `L_train = 1/2 (theta - a)^2`, `L_val = 1/2 theta^2`; the exact
/// hypergradient at `theta = 1, a = 0` is `xi * (1 - xi)`.
struct Quadratic;

impl BilevelProblem for Quadratic {
    fn train_grad_theta(&mut self, theta: &ParamVec, raw: &[f64]) -> distpro::Result<(f64, ParamVec)> {
        let d = theta.0[0].item() - raw[0];
        Ok((0.5 * d * d, ParamVec(vec![Tensor::scalar(d)])))
    }
    fn val_grad_theta(&mut self, theta: &ParamVec) -> distpro::Result<(f64, ParamVec)> {
        let t = theta.0[0].item();
        Ok((0.5 * t * t, ParamVec(vec![Tensor::scalar(t)])))
    }
    fn train_grad_alpha(&mut self, theta: &ParamVec, raw: &[f64]) -> distpro::Result<Vec<f64>> {
        Ok(vec![raw[0] - theta.0[0].item()])
    }
    fn val_loss(&mut self, theta: &ParamVec) -> distpro::Result<f64> {
        Ok(0.5 * theta.0[0].item().powi(2))
    }
}

fn main() -> distpro::Result<()> {
    let theta = ParamVec(vec![Tensor::scalar(1.0)]);
    let hg = hypergradient(&mut Quadratic, &theta, &[0.0], 0.1, EpsilonMode::Scaled(0.01))?;
    println!("quadratic: {:.12} (exact 0.09)", hg.grad[0]);

    let mut cfg = RunConfig::default();
    cfg.apply_overrides(&["data.n=256".into(), "teacher.channels=16,32".into(), "student.channels=8,16".into()])?;
    let (train, _) = cfg.datasets()?;
    let teacher = distpro::networks::Network::build(cfg.teacher_spec(&train), 0, distpro::rng::Stream::TeacherInit)?;
    let student = cfg.fresh_student(&train)?;
    let split = distpro::data::split(&train, 0.8, 0)?;
    let idx: Vec<usize> = (0..32).collect();
    let search = SearchConfig::default();
    let mut problem = DistillProblem::new(&student, &teacher, search.loss_spec(), split.train.batch(&idx), split.val.batch(&idx))?;
    let raw = vec![1.0; student.pathways.len()];
    let theta = student.theta();

    let approx = hypergradient(&mut problem, &theta, &raw, search.xi, search.epsilon)?;
    let reference = oracle::brute_force_hypergradient(&mut problem, &theta, &raw, search.xi, 1e-4)?;
    println!("{}", OracleReport::compare(&approx.grad, &reference)?);

    let steps: Vec<EpsilonMode> = [1e-2, 1e-3, 1e-4, 1e-5].into_iter().map(EpsilonMode::Scaled).collect();
    for p in oracle::sweep(&mut problem, &theta, &raw, search.xi, &[1e-4], &steps)? {
        println!("epsilon {:<14} max_rel_error {:.2e} cosine {:.8}", p.epsilon.to_string(), p.max_rel_error, p.cosine);
    }
    Ok(())
}
