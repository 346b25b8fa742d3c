//! Search phase: learn a per-step pathway weight schedule.
//!
//! Each step alternates two updates. First the raw weights descend a
//! hypergradient, the derivative of the validation loss after one inner SGD
//! step, `d L_val(theta - xi * grad_theta L_train(theta, a)) / d a`. The
//! mixed second derivative in it is replaced by a symmetric finite
//! difference of `grad_a L_train` at `theta +/- eps * grad_theta L_val`.
//! Then the student takes one SGD step under the new weights, and the new
//! weights are appended to the schedule.

use std::fmt;
use std::str::FromStr;

use crate::autodiff::{Graph, Tensor, Var};
use crate::data::{Batch, BatchCycler, DatasetSplit};
use crate::error::{Error, Result};
use crate::losses::{self, LossSpec, LossStats, Normalization, StudentState, TrainInputs, Weights};
use crate::networks::Network;
use crate::optim::ParamVec;
use crate::pathways::FeatureDistance;
use crate::rng::{self, Stream};
use crate::schedule::Schedule;

/// Finite-difference step for the hypergradient.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum EpsilonMode {
    /// Fixed `eps`.
    Fixed(f64),
    /// `eps = c / ||grad_theta L_val(theta')||`, so the perturbation of theta
    /// has norm `c`.
    Scaled(f64),
}

impl fmt::Display for EpsilonMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            EpsilonMode::Fixed(e) => write!(f, "fixed:{e:?}"),
            EpsilonMode::Scaled(c) => write!(f, "scaled:{c:?}"),
        }
    }
}

impl FromStr for EpsilonMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::Config(format!("epsilon {s:?} must be fixed:<eps> or scaled:<c>"));
        let (mode, v) = s.split_once(':').ok_or_else(bad)?;
        let v: f64 = v.trim().parse().map_err(|_| bad())?;
        if !(v > 0.0 && v.is_finite()) {
            return Err(Error::Config(format!("epsilon value {v} must be positive")));
        }
        match mode.trim() {
            "fixed" => Ok(EpsilonMode::Fixed(v)),
            "scaled" => Ok(EpsilonMode::Scaled(v)),
            _ => Err(bad()),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SearchConfig {
    /// Learning rate of the raw pathway weights.
    pub gamma: f64,
    /// Inner SGD learning rate of the student.
    pub xi: f64,
    pub epsilon: EpsilonMode,
    /// Bias logit of biased softmax.
    pub bias: f64,
    /// Raw-weight clip threshold.
    pub tau: f64,
    /// Number of search steps.
    pub search_steps: usize,
    /// Number of retrain steps the schedule will be stretched to.
    pub retrain_steps: usize,
    /// Fraction of the data used as the search train side.
    pub split_ratio: f64,
    pub seed: u64,
    pub normalization: Normalization,
    pub feature: FeatureDistance,
    /// Skip clipped pathways during search.
    pub clip: bool,
    pub batch_size: usize,
    /// Initial raw weight of every pathway.
    pub init_raw: f64,
}

impl Default for SearchConfig {
    fn default() -> Self {
        SearchConfig {
            gamma: 0.05,
            xi: 0.05,
            epsilon: EpsilonMode::Scaled(0.01),
            bias: 1.0,
            tau: 0.5,
            search_steps: 100,
            retrain_steps: 400,
            split_ratio: 0.8,
            seed: 0,
            normalization: Normalization::BiasedSoftmax,
            feature: FeatureDistance::L2,
            clip: true,
            batch_size: 64,
            init_raw: 1.0,
        }
    }
}

impl SearchConfig {
    pub fn validate(&self) -> Result<()> {
        let nonneg = |name: &str, v: f64| {
            if v >= 0.0 && v.is_finite() {
                Ok(())
            } else {
                Err(Error::Config(format!("{name} = {v} must be finite and >= 0")))
            }
        };
        nonneg("gamma", self.gamma)?;
        nonneg("xi", self.xi)?;
        if !(self.split_ratio > 0.0 && self.split_ratio < 1.0) {
            return Err(Error::Config(format!("split ratio {} must lie in (0, 1)", self.split_ratio)));
        }
        if self.search_steps > self.retrain_steps {
            return Err(Error::Config(format!(
                "search steps {} exceed retrain steps {}",
                self.search_steps, self.retrain_steps
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be >= 1".into()));
        }
        if !self.init_raw.is_finite() {
            return Err(Error::Config("initial raw weight must be finite".into()));
        }
        self.loss_spec().validate()
    }

    pub fn loss_spec(&self) -> LossSpec {
        LossSpec {
            feature: self.feature,
            tau: self.tau,
            clip: self.clip,
            normalization: self.normalization,
            bias: self.bias,
        }
    }
}

/// The two-level problem seen by the hypergradient: a train loss in
/// `(theta, raw weights)` and a validation loss in `theta`.
pub trait BilevelProblem {
    /// `(L_train, grad_theta L_train)` at `(theta, raw)`.
    fn train_grad_theta(&mut self, theta: &ParamVec, raw: &[f64]) -> Result<(f64, ParamVec)>;
    /// `(L_val, grad_theta L_val)` at `theta`.
    fn val_grad_theta(&mut self, theta: &ParamVec) -> Result<(f64, ParamVec)>;
    /// `grad_raw L_train` at `(theta, raw)`.
    fn train_grad_alpha(&mut self, theta: &ParamVec, raw: &[f64]) -> Result<Vec<f64>>;
    fn val_loss(&mut self, theta: &ParamVec) -> Result<f64>;
}

/// One plain SGD step `theta - xi * grad`.
pub fn inner_step(theta: &ParamVec, grad: &ParamVec, xi: f64) -> ParamVec {
    theta.added(-xi, grad)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Hypergradient {
    /// `d L_val(theta_next) / d raw`.
    pub grad: Vec<f64>,
    /// Step actually used (0 when the scaled step was undefined).
    pub epsilon: f64,
    /// `||grad_theta L_val(theta_next)||`.
    pub val_grad_norm: f64,
    /// `L_train(theta, raw)`.
    pub train_loss: f64,
    /// `L_val(theta_next)`.
    pub val_loss: f64,
}

/// Finite-difference hypergradient at `(theta, raw)`; neither is modified.
pub fn hypergradient<P: BilevelProblem>(
    problem: &mut P,
    theta: &ParamVec,
    raw: &[f64],
    xi: f64,
    epsilon: EpsilonMode,
) -> Result<Hypergradient> {
    let (train_loss, g_train) = problem.train_grad_theta(theta, raw)?;
    let next = inner_step(theta, &g_train, xi);
    let (val_loss, v) = problem.val_grad_theta(&next)?;
    let norm = v.norm();
    if !norm.is_finite() {
        return Err(Error::Numeric("non-finite validation gradient".into()));
    }
    let eps = match epsilon {
        EpsilonMode::Fixed(e) if e > 0.0 => e,
        EpsilonMode::Fixed(e) => return Err(Error::Config(format!("epsilon {e} must be positive"))),
        EpsilonMode::Scaled(_) if norm == 0.0 => {
            return Ok(Hypergradient {
                grad: vec![0.0; raw.len()],
                epsilon: 0.0,
                val_grad_norm: 0.0,
                train_loss,
                val_loss,
            })
        }
        EpsilonMode::Scaled(c) => c / norm,
    };
    let plus = theta.added(eps, &v);
    let minus = theta.added(-eps, &v);
    let g_plus = problem.train_grad_alpha(&plus, raw)?;
    let g_minus = problem.train_grad_alpha(&minus, raw)?;
    let grad: Vec<f64> = g_plus
        .iter()
        .zip(&g_minus)
        .map(|(p, m)| -xi * (p - m) / (2.0 * eps))
        .collect();
    if grad.iter().any(|g| !g.is_finite()) {
        return Err(Error::Numeric("non-finite hypergradient".into()));
    }
    Ok(Hypergradient {
        grad,
        epsilon: eps,
        val_grad_norm: norm,
        train_loss,
        val_loss,
    })
}

/// Forward/backward pass counters.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct CostCounters {
    pub teacher_forwards: usize,
    pub student_forwards: usize,
    /// Backward passes that propagate into student parameters.
    pub student_backwards: usize,
    pub loss: LossStats,
}

impl CostCounters {
    pub fn since(&self, earlier: &CostCounters) -> CostCounters {
        CostCounters {
            teacher_forwards: self.teacher_forwards - earlier.teacher_forwards,
            student_forwards: self.student_forwards - earlier.student_forwards,
            student_backwards: self.student_backwards - earlier.student_backwards,
            loss: LossStats {
                evaluated: self.loss.evaluated - earlier.loss.evaluated,
                skipped: self.loss.skipped - earlier.loss.skipped,
            },
        }
    }
}

/// The distillation problem on one (train batch, validation batch) pair.
/// Teacher taps for the train batch are computed once at construction.
pub struct DistillProblem<'a> {
    student: &'a StudentState,
    loss: LossSpec,
    train: Batch,
    val: Batch,
    teacher_taps: Vec<Tensor>,
    pub counters: CostCounters,
}

impl<'a> DistillProblem<'a> {
    /// `student` fixes the parameter layout; its own values are not used.
    pub fn new(student: &'a StudentState, teacher: &Network, loss: LossSpec, train: Batch, val: Batch) -> Result<Self> {
        let mut counters = CostCounters::default();
        let (_, teacher_taps) = teacher.forward_with_taps(&train.images)?;
        counters.teacher_forwards += 1;
        Ok(DistillProblem {
            student,
            loss,
            train,
            val,
            teacher_taps,
            counters,
        })
    }

    /// Swaps in a new batch pair, running the teacher on the train side.
    pub fn set_batches(&mut self, teacher: &Network, train: Batch, val: Batch) -> Result<()> {
        let (_, taps) = teacher.forward_with_taps(&train.images)?;
        self.counters.teacher_forwards += 1;
        self.teacher_taps = taps;
        self.train = train;
        self.val = val;
        Ok(())
    }

    fn record_train(&mut self, g: &mut Graph, theta: &ParamVec, grad_theta: bool, raw: Var) -> Result<(Var, Vec<Var>)> {
        let bound = self.student.bind(g, theta, grad_theta)?;
        let images = g.constant(self.train.images.clone())?;
        let taps = self
            .teacher_taps
            .iter()
            .map(|t| g.constant(t.clone()))
            .collect::<Result<Vec<_>>>()?;
        let inputs = TrainInputs {
            student: self.student,
            theta: &bound,
            images,
            labels: &self.train.labels,
            teacher_taps: &taps,
        };
        let out = losses::train_loss(g, &inputs, Weights::Raw(raw), &self.loss, &mut self.counters.loss)?;
        self.counters.student_forwards += 1;
        Ok((out.total, bound.all()))
    }

    fn record_val(&mut self, g: &mut Graph, theta: &ParamVec, grad: bool) -> Result<(Var, Vec<Var>)> {
        let n = self.student.net_tensors();
        if theta.len() < n {
            return Err(Error::Contract(format!("theta has {} tensors, network needs {n}", theta.len())));
        }
        let net_vars = theta.0[..n].iter().map(|t| g.leaf(t.clone(), grad)).collect::<Result<Vec<_>>>()?;
        let images = g.constant(self.val.images.clone())?;
        let loss = losses::val_loss(g, &self.student.net, &net_vars, images, &self.val.labels)?;
        self.counters.student_forwards += 1;
        Ok((loss, net_vars))
    }
}

fn collect_grads(g: &Graph, loss: Var, vars: &[Var], like: &ParamVec) -> Result<ParamVec> {
    let mut grads = g.backward(loss)?;
    let mut out: Vec<Tensor> = vars
        .iter()
        .zip(&like.0)
        .map(|(&v, t)| grads.take_or_zeros(v, t.shape()))
        .collect();
    out.extend(like.0[vars.len()..].iter().map(|t| Tensor::zeros(t.shape())));
    Ok(ParamVec(out))
}

impl BilevelProblem for DistillProblem<'_> {
    fn train_grad_theta(&mut self, theta: &ParamVec, raw: &[f64]) -> Result<(f64, ParamVec)> {
        let mut g = Graph::new();
        let r = g.constant(Tensor::from_vec(raw.to_vec()))?;
        let (loss, vars) = self.record_train(&mut g, theta, true, r)?;
        let grads = collect_grads(&g, loss, &vars, theta)?;
        self.counters.student_backwards += 1;
        Ok((g.value(loss).item(), grads))
    }

    fn val_grad_theta(&mut self, theta: &ParamVec) -> Result<(f64, ParamVec)> {
        let mut g = Graph::new();
        let (loss, vars) = self.record_val(&mut g, theta, true)?;
        let grads = collect_grads(&g, loss, &vars, theta)?;
        self.counters.student_backwards += 1;
        Ok((g.value(loss).item(), grads))
    }

    fn train_grad_alpha(&mut self, theta: &ParamVec, raw: &[f64]) -> Result<Vec<f64>> {
        let mut g = Graph::new();
        let r = g.leaf(Tensor::from_vec(raw.to_vec()), true)?;
        let (loss, _) = self.record_train(&mut g, theta, false, r)?;
        // theta is constant here, so this sweep only touches the weight path
        let mut grads = g.backward(loss)?;
        Ok(grads.take_or_zeros(r, &[raw.len()]).into_data())
    }

    fn val_loss(&mut self, theta: &ParamVec) -> Result<f64> {
        let mut g = Graph::new();
        let (loss, _) = self.record_val(&mut g, theta, false)?;
        Ok(g.value(loss).item())
    }
}

/// One line of the search log.
#[derive(Clone, Debug, PartialEq)]
pub struct StepLog {
    pub step: usize,
    /// `L_train(theta_t, raw_t)` before either update.
    pub train_loss: f64,
    /// `L_val` after the look-ahead inner step.
    pub val_loss: f64,
    /// Pathways above the clip threshold after the weight update.
    pub active: usize,
    pub alpha_max: f64,
    pub alpha_min: f64,
    pub hypergrad_norm: f64,
    pub epsilon: f64,
    /// Passes spent inside the hypergradient.
    pub hypergrad_cost: CostCounters,
    /// Passes spent on the whole step, including the teacher and the
    /// student update.
    pub step_cost: CostCounters,
}

impl fmt::Display for StepLog {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "step={} l_train={:?} l_val={:?} active={} alpha_max={:?} alpha_min={:?} hypergrad_norm={:?} epsilon={:?} \
             hg_student_fwd={} hg_student_bwd={} teacher_fwd={} student_fwd={} student_bwd={} pathway_evals={} pathway_skips={}",
            self.step,
            self.train_loss,
            self.val_loss,
            self.active,
            self.alpha_max,
            self.alpha_min,
            self.hypergrad_norm,
            self.epsilon,
            self.hypergrad_cost.student_forwards,
            self.hypergrad_cost.student_backwards,
            self.step_cost.teacher_forwards,
            self.step_cost.student_forwards,
            self.step_cost.student_backwards,
            self.step_cost.loss.evaluated,
            self.step_cost.loss.skipped,
        )
    }
}

#[derive(Clone, Debug)]
pub struct SearchOutcome {
    pub schedule: Schedule,
    pub log: Vec<StepLog>,
    /// Student and block parameters after the last step.
    pub student: StudentState,
    pub counters: CostCounters,
}

/// Runs the search loop for `cfg.search_steps` steps on `data`, starting
/// every raw weight at `cfg.init_raw`.
pub fn search(cfg: &SearchConfig, data: &DatasetSplit, teacher: &Network, student: StudentState) -> Result<SearchOutcome> {
    cfg.validate()?;
    let ids = student.pathways.ids();
    let mut schedule = Schedule::empty(ids)?;
    let mut raw = vec![cfg.init_raw; student.pathways.len()];
    let mut theta = student.theta();
    let mut train_batches = BatchCycler::new(data.train.len(), cfg.batch_size, rng::stream(cfg.seed, Stream::SearchBatches));
    let mut val_batches = BatchCycler::new(data.val.len(), cfg.batch_size, rng::stream(cfg.seed, Stream::SearchValBatches));
    let loss = cfg.loss_spec();
    let mut log = Vec::with_capacity(cfg.search_steps);
    let mut totals = CostCounters::default();

    for step in 0..cfg.search_steps {
        let train = data.train.batch(&train_batches.next_indices());
        let val = data.val.batch(&val_batches.next_indices());
        let result = (|| -> Result<(StepLog, Vec<f64>, Vec<f64>, ParamVec)> {
            let mut problem = DistillProblem::new(&student, teacher, loss, train, val)?;
            let before = problem.counters;
            let hg = hypergradient(&mut problem, &theta, &raw, cfg.xi, cfg.epsilon)?;
            let hg_cost = problem.counters.since(&before);

            let new_raw: Vec<f64> = raw.iter().zip(&hg.grad).map(|(r, g)| r - cfg.gamma * g).collect();
            if new_raw.iter().any(|r| !r.is_finite()) {
                return Err(Error::Numeric("non-finite pathway weights".into()));
            }
            let (_, grad) = problem.train_grad_theta(&theta, &new_raw)?;
            if !grad.all_finite() {
                return Err(Error::Numeric("non-finite student gradient".into()));
            }
            let new_theta = inner_step(&theta, &grad, cfg.xi);
            let normalized = losses::normalize_alpha(&new_raw, cfg.normalization, cfg.bias)?;
            let active = if cfg.clip {
                losses::active_mask(&new_raw, cfg.tau).iter().filter(|&&a| a).count()
            } else {
                new_raw.len()
            };
            let entry = StepLog {
                step,
                train_loss: hg.train_loss,
                val_loss: hg.val_loss,
                active,
                alpha_max: normalized.iter().copied().fold(f64::NEG_INFINITY, f64::max),
                alpha_min: normalized.iter().copied().fold(f64::INFINITY, f64::min),
                hypergrad_norm: hg.grad.iter().map(|g| g * g).sum::<f64>().sqrt(),
                epsilon: hg.epsilon,
                hypergrad_cost: hg_cost,
                step_cost: problem.counters,
            };
            Ok((entry, new_raw, normalized, new_theta))
        })();
        let result = result.and_then(|(entry, new_raw, normalized, new_theta)| {
            schedule.push(normalized, new_raw.clone())?;
            Ok((entry, new_raw, new_theta))
        });
        match result {
            Ok((entry, new_raw, new_theta)) => {
                totals = add_counters(&totals, &entry.step_cost);
                log.push(entry);
                raw = new_raw;
                theta = new_theta;
            }
            Err(e) => {
                return Err(Error::Search {
                    step,
                    partial: Box::new(schedule),
                    source: Box::new(e),
                })
            }
        }
    }
    let mut final_student = student;
    final_student.set_theta(theta)?;
    Ok(SearchOutcome {
        schedule,
        log,
        student: final_student,
        counters: totals,
    })
}

fn add_counters(a: &CostCounters, b: &CostCounters) -> CostCounters {
    CostCounters {
        teacher_forwards: a.teacher_forwards + b.teacher_forwards,
        student_forwards: a.student_forwards + b.student_forwards,
        student_backwards: a.student_backwards + b.student_backwards,
        loss: LossStats {
            evaluated: a.loss.evaluated + b.loss.evaluated,
            skipped: a.loss.skipped + b.loss.skipped,
        },
    }
}
