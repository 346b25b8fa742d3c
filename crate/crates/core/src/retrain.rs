//! Retrain phase: a fresh student trained under a fixed schedule.

use std::fmt::Write as _;
use std::path::Path;

use crate::autodiff::{Graph, Tensor};
use crate::data::{BatchCycler, Dataset};
use crate::error::{Error, Result};
use crate::losses::{self, LossSpec, LossStats, StudentState, TrainInputs, Weights};
use crate::networks::Network;
use crate::optim::{cosine_lr, ParamVec, Sgd};
use crate::rng::{self, Stream};
use crate::schedule::Schedule;

#[derive(Clone, Debug, PartialEq)]
pub struct RetrainConfig {
    pub steps: usize,
    /// Base learning rate of the cosine decay.
    pub lr: f64,
    pub momentum: f64,
    pub batch_size: usize,
    pub seed: u64,
    pub loss: LossSpec,
    /// Evaluate on the held-out set every this many steps (0: only at the end).
    pub eval_every: usize,
}

impl Default for RetrainConfig {
    fn default() -> Self {
        RetrainConfig {
            steps: 400,
            lr: 0.05,
            momentum: 0.9,
            batch_size: 64,
            seed: 0,
            loss: LossSpec::default(),
            eval_every: 0,
        }
    }
}

impl RetrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("retrain lr {} must be finite and >= 0", self.lr)));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config(format!("momentum {} must lie in [0, 1)", self.momentum)));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be >= 1".into()));
        }
        self.loss.validate()
    }
}

/// What the student is distilled from.
#[derive(Clone, Copy, Debug)]
pub enum Guidance<'a> {
    /// Plain supervised training; the teacher is never run.
    None,
    /// Row `t` of the schedule weights the pathway losses at step `t`.
    Schedule(&'a Schedule),
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CurvePoint {
    pub step: usize,
    pub lr: f64,
    /// Full weighted loss on the batch.
    pub loss: f64,
    /// Cross-entropy part of it.
    pub label_loss: f64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EvalPoint {
    /// Number of completed steps.
    pub step: usize,
    pub accuracy: f64,
    pub loss: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RetrainReport {
    pub config: RetrainConfig,
    pub guidance: String,
    pub accuracy: f64,
    pub loss: f64,
    pub steps: usize,
    pub epochs: usize,
    pub curve: Vec<CurvePoint>,
    pub evals: Vec<EvalPoint>,
    pub teacher_forwards: usize,
    pub pathway: LossStats,
    /// Schedule fingerprint before and after training.
    pub schedule_fingerprint: Option<(u64, u64)>,
}

impl RetrainReport {
    /// `key=value` lines.
    pub fn to_text(&self) -> String {
        let c = &self.config;
        let mut out = String::new();
        let mut kv = |k: &str, v: String| writeln!(out, "{k}={v}").unwrap();
        kv("guidance", self.guidance.clone());
        kv("accuracy", format!("{:?}", self.accuracy));
        kv("loss", format!("{:?}", self.loss));
        kv("steps", self.steps.to_string());
        kv("epochs", self.epochs.to_string());
        kv("lr", format!("{:?}", c.lr));
        kv("momentum", format!("{:?}", c.momentum));
        kv("batch_size", c.batch_size.to_string());
        kv("seed", c.seed.to_string());
        kv("feature", c.loss.feature.to_string());
        kv("clip", c.loss.clip.to_string());
        kv("tau", format!("{:?}", c.loss.tau));
        kv("teacher_forwards", self.teacher_forwards.to_string());
        kv("pathway_evals", self.pathway.evaluated.to_string());
        kv("pathway_skips", self.pathway.skipped.to_string());
        if let Some((a, b)) = self.schedule_fingerprint {
            kv("schedule_fingerprint", format!("{a:016x}"));
            kv("schedule_unchanged", (a == b).to_string());
        }
        out
    }

    /// Per-step curve, `step,lr,loss,label_loss`.
    pub fn curve_csv(&self) -> String {
        let mut out = String::from("step,lr,loss,label_loss\n");
        for p in &self.curve {
            writeln!(out, "{},{:?},{:?},{:?}", p.step, p.lr, p.loss, p.label_loss).unwrap();
        }
        out
    }

    pub fn evals_csv(&self) -> String {
        let mut out = String::from("step,accuracy,loss\n");
        for p in &self.evals {
            writeln!(out, "{},{:?},{:?}", p.step, p.accuracy, p.loss).unwrap();
        }
        out
    }

    /// Writes `report.txt`, `curve.csv` and `evals.csv` into `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        for (name, body) in [
            ("report.txt", self.to_text()),
            ("curve.csv", self.curve_csv()),
            ("evals.csv", self.evals_csv()),
        ] {
            let p = dir.join(name);
            std::fs::write(&p, body).map_err(|e| Error::io(&p, e))?;
        }
        Ok(())
    }
}

/// Checks that `schedule` can drive a retrain of `student` for `steps`.
pub fn check_schedule(schedule: &Schedule, student: &StudentState, steps: usize) -> Result<()> {
    let ids = student.pathways.ids();
    if schedule.pathway_ids() != ids.as_slice() {
        return Err(Error::Config(format!(
            "schedule pathways [{}] do not match the student's [{}]",
            schedule.pathway_ids().join(","),
            ids.join(",")
        )));
    }
    if schedule.len() != steps {
        return Err(Error::Config(format!(
            "schedule has {} rows for {steps} retrain steps; interpolate it first",
            schedule.len()
        )));
    }
    Ok(())
}

/// Trains `student` (network and transform blocks) on `train` for
/// `cfg.steps` steps and evaluates it on `eval`.
pub fn retrain(
    guidance: Guidance<'_>,
    train: &Dataset,
    eval: &Dataset,
    teacher: &Network,
    student: StudentState,
    cfg: &RetrainConfig,
) -> Result<(StudentState, RetrainReport)> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::Contract("empty training set".into()));
    }
    let fingerprint_before = match guidance {
        Guidance::Schedule(s) => {
            check_schedule(s, &student, cfg.steps)?;
            Some(s.fingerprint())
        }
        Guidance::None => None,
    };
    let mut student = student;
    let mut theta = student.theta();
    let mut opt = Sgd::new(cfg.momentum);
    let mut batches = BatchCycler::new(train.len(), cfg.batch_size, rng::stream(cfg.seed, Stream::RetrainBatches));
    let mut curve = Vec::with_capacity(cfg.steps);
    let mut evals = Vec::new();
    let mut stats = LossStats::default();
    let mut teacher_forwards = 0;

    for step in 0..cfg.steps {
        let batch = train.batch(&batches.next_indices());
        let lr = cosine_lr(cfg.lr, step, cfg.steps);
        let mut g = Graph::new();
        let bound = student.bind(&mut g, &theta, true)?;
        let images = g.constant(batch.images.clone())?;
        let (total, label) = match guidance {
            Guidance::None => {
                let l = losses::val_loss(&mut g, &student.net, &bound.net, images, &batch.labels)?;
                (l, l)
            }
            Guidance::Schedule(s) => {
                let (norm, raw) = s.row(step).expect("length checked");
                let any_active = !cfg.loss.clip || losses::active_mask(raw, cfg.loss.tau).contains(&true);
                let taps = if any_active {
                    teacher_forwards += 1;
                    let (_, taps) = teacher.forward_with_taps(&batch.images)?;
                    taps.into_iter().map(|t| g.constant(t)).collect::<Result<Vec<_>>>()?
                } else {
                    Vec::new()
                };
                let weights = g.constant(Tensor::from_vec(norm.to_vec()))?;
                let inputs = TrainInputs {
                    student: &student,
                    theta: &bound,
                    images,
                    labels: &batch.labels,
                    teacher_taps: &taps,
                };
                let out = losses::train_loss(&mut g, &inputs, Weights::Normalized { weights, raw }, &cfg.loss, &mut stats)?;
                (out.total, out.label)
            }
        };
        let loss_value = g.value(total).item();
        let label_value = g.value(label).item();
        let mut grads = g.backward(total)?;
        let grads = ParamVec(
            bound
                .all()
                .into_iter()
                .zip(&theta.0)
                .map(|(v, t)| grads.take_or_zeros(v, t.shape()))
                .collect(),
        );
        if !grads.all_finite() {
            return Err(Error::Numeric(format!("non-finite gradient at retrain step {step}")));
        }
        opt.step(&mut theta, &grads, lr);
        curve.push(CurvePoint {
            step,
            lr,
            loss: loss_value,
            label_loss: label_value,
        });
        if cfg.eval_every > 0 && (step + 1) % cfg.eval_every == 0 && step + 1 < cfg.steps {
            student.set_theta(theta.clone())?;
            let (accuracy, loss) = evaluate(&student.net, eval)?;
            evals.push(EvalPoint {
                step: step + 1,
                accuracy,
                loss,
            });
        }
    }
    student.set_theta(theta)?;
    let (accuracy, loss) = evaluate(&student.net, eval)?;
    evals.push(EvalPoint {
        step: cfg.steps,
        accuracy,
        loss,
    });
    let (guidance_name, schedule_fingerprint) = match guidance {
        Guidance::None => ("none".to_string(), None),
        Guidance::Schedule(s) => (
            "schedule".to_string(),
            fingerprint_before.map(|b| (b, s.fingerprint())),
        ),
    };
    let report = RetrainReport {
        config: cfg.clone(),
        guidance: guidance_name,
        accuracy,
        loss,
        steps: cfg.steps,
        epochs: batches.epoch(),
        curve,
        evals,
        teacher_forwards,
        pathway: stats,
        schedule_fingerprint,
    };
    Ok((student, report))
}

const EVAL_CHUNK: usize = 256;

/// Accuracy (argmax, first index on ties) and mean cross-entropy.
pub fn evaluate(net: &Network, data: &Dataset) -> Result<(f64, f64)> {
    if data.is_empty() {
        return Err(Error::Contract("cannot evaluate on an empty set".into()));
    }
    let n = data.len();
    let c = data.num_classes();
    let mut correct = 0usize;
    let mut loss = 0.0;
    let mut start = 0;
    while start < n {
        let len = EVAL_CHUNK.min(n - start);
        let images = data.images().narrow_batch(start, len)?;
        let (logits, _) = net.forward_with_taps(&images)?;
        if logits.shape() != [len, c] {
            return Err(Error::dim(
                "evaluate",
                format!("logits {:?} for {c} classes", logits.shape()),
            ));
        }
        for (i, row) in logits.data().chunks(c).enumerate() {
            let label = data.labels()[start + i];
            let (best, _) = row
                .iter()
                .enumerate()
                .fold((0, f64::NEG_INFINITY), |acc, (j, &v)| if v > acc.1 { (j, v) } else { acc });
            correct += (best == label) as usize;
            let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
            loss += lse - row[label];
        }
        start += len;
    }
    Ok((correct as f64 / n as f64, loss / n as f64))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synth_task;
    use crate::networks::{Layer, NetworkSpec};
    use crate::pathways::{PathwaySet, TransformKind};

    fn setup() -> (Dataset, Network, StudentState) {
        let data = synth_task(96, 2, 0.05, 3).unwrap();
        let tspec = NetworkSpec::staged(&[4, 6], 8, 2);
        let sspec = NetworkSpec::staged(&[2, 3], 8, 2);
        let data = {
            let images = data.images().clone();
            // downsample 16x16 to 8x8 by dropping every other pixel
            let mut small = Vec::new();
            for img in images.data().chunks(256) {
                for y in 0..8 {
                    for x in 0..8 {
                        small.push(img[2 * y * 16 + 2 * x]);
                    }
                }
            }
            Dataset::new(Tensor::new(&[96, 1, 8, 8], small).unwrap(), data.labels().to_vec(), 2).unwrap()
        };
        let teacher = Network::build(tspec.clone(), 1, Stream::TeacherInit).unwrap();
        let net = Network::build(sspec.clone(), 2, Stream::StudentInit).unwrap();
        let pathways = PathwaySet::enumerate(&sspec, &tspec, &[TransformKind::PlainConv], 2).unwrap();
        (data, teacher, StudentState { net, pathways })
    }

    fn cfg(steps: usize) -> RetrainConfig {
        RetrainConfig {
            steps,
            batch_size: 16,
            ..Default::default()
        }
    }

    #[test]
    fn zero_schedule_matches_supervised_training() {
        let (data, teacher, student) = setup();
        let c = RetrainConfig {
            loss: LossSpec {
                clip: false,
                ..Default::default()
            },
            ..cfg(6)
        };
        let zeros = Schedule::constant(student.pathways.ids(), 0.0, 0.0, 6).unwrap();
        let (a, _) = retrain(Guidance::Schedule(&zeros), &data, &data, &teacher, student.clone(), &c).unwrap();
        let (b, rb) = retrain(Guidance::None, &data, &data, &teacher, student, &c).unwrap();
        assert_eq!(a.net.params(), b.net.params());
        assert_eq!(rb.teacher_forwards, 0);
    }

    #[test]
    fn deterministic_and_schedule_untouched() {
        let (data, teacher, student) = setup();
        let s = Schedule::constant(student.pathways.ids(), 0.25, 1.0, 5).unwrap();
        let (a, ra) = retrain(Guidance::Schedule(&s), &data, &data, &teacher, student.clone(), &cfg(5)).unwrap();
        let (b, rb) = retrain(Guidance::Schedule(&s), &data, &data, &teacher, student, &cfg(5)).unwrap();
        assert_eq!(a, b);
        assert_eq!(ra, rb);
        let (x, y) = ra.schedule_fingerprint.unwrap();
        assert_eq!(x, y);
        assert_eq!(ra.curve.len(), 5);
        assert_eq!(ra.pathway.evaluated, 5 * 4);
        assert!(ra.to_text().contains("schedule_unchanged=true"));
    }

    #[test]
    fn mismatched_schedule_fails_before_training() {
        let (data, teacher, student) = setup();
        let mut ids = student.pathways.ids();
        ids.swap(0, 1);
        let s = Schedule::constant(ids, 0.25, 1.0, 5).unwrap();
        let err = retrain(Guidance::Schedule(&s), &data, &data, &teacher, student.clone(), &cfg(5)).unwrap_err();
        assert!(matches!(err, Error::Config(_)), "{err}");
        let short = Schedule::constant(student.pathways.ids(), 0.25, 1.0, 4).unwrap();
        let err = retrain(Guidance::Schedule(&short), &data, &data, &teacher, student, &cfg(5)).unwrap_err();
        assert!(matches!(err, Error::Config(_)), "{err}");
    }

    #[test]
    fn evaluate_cases() {
        let (data, _, _) = setup();
        // linear net on the flattened image that outputs the label directly
        let spec = NetworkSpec {
            input: [1, 8, 8],
            layers: vec![Layer::GlobalPool, Layer::Linear { out: None }],
            taps: vec![],
            num_classes: 2,
        };
        let net = Network::build(spec.clone(), 0, Stream::StudentInit).unwrap();
        let (acc, loss) = evaluate(&net, &data).unwrap();
        assert!((0.0..=1.0).contains(&acc) && loss > 0.0);
        let scaled = Network::from_params(spec, net.params().iter().map(|t| t.map(|v| v * 3.0)).collect()).unwrap();
        assert_eq!(evaluate(&scaled, &data).unwrap().0, acc);
    }
}
