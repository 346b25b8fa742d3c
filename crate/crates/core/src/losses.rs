//! Pathway weight normalization and the weighted distillation objective.
//!
//! The training loss for a batch is
//! `CE(student(x), y) + sum_p alpha[p] * distance(block_p(student tap), teacher tap)`
//! where `alpha = normalize(raw)`. The validation loss is the plain
//! cross-entropy.

use std::fmt;
use std::str::FromStr;

use crate::autodiff::{Graph, Tensor, Var};
use crate::error::{Error, Result};
use crate::networks::Network;
use crate::optim::ParamVec;
use crate::pathways::{self, FeatureDistance, PathwaySet};

/// How raw pathway weights become loss weights.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Normalization {
    /// `softmax(concat(raw, g))` without the bias entry; weights sum below one.
    BiasedSoftmax,
    Softmax,
    /// `raw / (||raw||_1 + 1)`
    L1Plus1,
    /// `raw / ||raw||_1`
    L1,
    Sigmoid,
}

impl Normalization {
    pub const ALL: [Normalization; 5] = [
        Normalization::BiasedSoftmax,
        Normalization::Softmax,
        Normalization::L1Plus1,
        Normalization::L1,
        Normalization::Sigmoid,
    ];
}

impl fmt::Display for Normalization {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Normalization::BiasedSoftmax => "biased-softmax",
            Normalization::Softmax => "softmax",
            Normalization::L1Plus1 => "l1-plus-1",
            Normalization::L1 => "l1",
            Normalization::Sigmoid => "sigmoid",
        })
    }
}

impl FromStr for Normalization {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Normalization::ALL
            .into_iter()
            .find(|n| n.to_string() == s)
            .ok_or_else(|| Error::Config(format!("unknown normalization {s:?}")))
    }
}

/// Records `normalize(raw)` into the graph.
pub fn normalize_graph(g: &mut Graph, raw: Var, strategy: Normalization, bias: f64) -> Result<Var> {
    let p = g.shape(raw)[0];
    match strategy {
        Normalization::BiasedSoftmax => {
            let b = g.constant(Tensor::scalar(bias))?;
            let logits = g.concat(&[raw, b])?;
            let sm = g.softmax(logits, 0)?;
            g.slice(sm, 0, p)
        }
        Normalization::Softmax => g.softmax(raw, 0),
        Normalization::L1Plus1 | Normalization::L1 => {
            let a = g.abs(raw)?;
            let mut norm = g.sum(a)?;
            if strategy == Normalization::L1Plus1 {
                norm = g.add_scalar(norm, 1.0)?;
            }
            g.div(raw, norm)
        }
        Normalization::Sigmoid => g.sigmoid(raw),
    }
}

/// Value-only [`normalize_graph`].
pub fn normalize_alpha(raw: &[f64], strategy: Normalization, bias: f64) -> Result<Vec<f64>> {
    if raw.is_empty() {
        return Ok(Vec::new());
    }
    let mut g = Graph::new();
    let r = g.constant(Tensor::from_vec(raw.to_vec()))?;
    let n = normalize_graph(&mut g, r, strategy, bias)?;
    Ok(g.value(n).data().to_vec())
}

/// Raw and normalized pathway weights at one step.
#[derive(Clone, Debug, PartialEq)]
pub struct AlphaState {
    pub raw: Vec<f64>,
    pub normalized: Vec<f64>,
    pub strategy: Normalization,
    pub bias: f64,
}

impl AlphaState {
    pub fn new(raw: Vec<f64>, strategy: Normalization, bias: f64) -> Result<Self> {
        let normalized = normalize_alpha(&raw, strategy, bias)?;
        Ok(AlphaState {
            raw,
            normalized,
            strategy,
            bias,
        })
    }

    /// Probability mass held by the bias logit under biased softmax:
    /// `exp(g) / (sum exp(raw) + exp(g))`, zero for other strategies.
    pub fn bias_mass(&self) -> f64 {
        if self.strategy != Normalization::BiasedSoftmax {
            return 0.0;
        }
        let max = self.raw.iter().copied().fold(self.bias, f64::max);
        let denom: f64 = self.raw.iter().map(|r| (r - max).exp()).sum::<f64>() + (self.bias - max).exp();
        (self.bias - max).exp() / denom
    }
}

/// `mask[p] = raw[p] > tau`.
pub fn active_mask(raw: &[f64], tau: f64) -> Vec<bool> {
    raw.iter().map(|&r| r > tau).collect()
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossSpec {
    pub feature: FeatureDistance,
    /// Clip threshold on raw weights.
    pub tau: f64,
    /// Skip pathways whose raw weight is at or below `tau`.
    pub clip: bool,
    pub normalization: Normalization,
    /// Bias logit for biased softmax.
    pub bias: f64,
}

impl Default for LossSpec {
    fn default() -> Self {
        LossSpec {
            feature: FeatureDistance::L2,
            tau: 0.5,
            clip: true,
            normalization: Normalization::BiasedSoftmax,
            bias: 1.0,
        }
    }
}

impl LossSpec {
    pub fn validate(&self) -> Result<()> {
        if !self.tau.is_finite() {
            return Err(Error::Config(format!("tau {} must be finite", self.tau)));
        }
        if !self.bias.is_finite() {
            return Err(Error::Config(format!("bias {} must be finite", self.bias)));
        }
        Ok(())
    }
}

/// Student network plus every transform block: the parameters trained by
/// the inner optimization.
#[derive(Clone, Debug, PartialEq)]
pub struct StudentState {
    pub net: Network,
    pub pathways: PathwaySet,
}

/// Graph leaves for a bound [`StudentState`].
#[derive(Clone, Debug)]
pub struct BoundTheta {
    pub net: Vec<Var>,
    pub blocks: Vec<Vec<Var>>,
}

impl BoundTheta {
    /// Every leaf in parameter-vector order.
    pub fn all(&self) -> Vec<Var> {
        self.net.iter().chain(self.blocks.iter().flatten()).copied().collect()
    }
}

impl StudentState {
    /// Network parameters followed by block parameters in pathway order.
    pub fn theta(&self) -> ParamVec {
        let mut v = self.net.param_vec();
        v.0.extend(self.pathways.param_vec().0);
        v
    }

    /// Number of leading tensors of [`Self::theta`] owned by the network.
    pub fn net_tensors(&self) -> usize {
        self.net.params().len()
    }

    pub fn set_theta(&mut self, theta: ParamVec) -> Result<()> {
        let mut all = theta.0;
        let blocks = all.split_off(self.net_tensors().min(all.len()));
        self.net.set_params(ParamVec(all))?;
        self.pathways.set_params(blocks)
    }

    /// Binds `theta` (laid out as [`Self::theta`]) as graph leaves.
    pub fn bind(&self, g: &mut Graph, theta: &ParamVec, requires_grad: bool) -> Result<BoundTheta> {
        let counts = self.pathways.param_counts();
        let expected = self.net_tensors() + counts.iter().sum::<usize>();
        if theta.len() != expected {
            return Err(Error::Contract(format!(
                "theta has {} tensors, student layout needs {expected}",
                theta.len()
            )));
        }
        let mut it = theta.0.iter();
        let mut leaf = |g: &mut Graph| g.leaf(it.next().unwrap().clone(), requires_grad);
        let net = (0..self.net_tensors()).map(|_| leaf(g)).collect::<Result<Vec<_>>>()?;
        let blocks = counts
            .iter()
            .map(|&c| (0..c).map(|_| leaf(g)).collect::<Result<Vec<_>>>())
            .collect::<Result<Vec<_>>>()?;
        Ok(BoundTheta { net, blocks })
    }
}

/// Where the pathway weights of a train loss come from.
#[derive(Clone, Copy, Debug)]
pub enum Weights<'a> {
    /// Raw weights; normalization is recorded in the graph.
    Raw(Var),
    /// Already-normalized weights, with the raw values used for clipping.
    Normalized { weights: Var, raw: &'a [f64] },
}

/// Counts pathway feature-loss evaluations.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct LossStats {
    pub evaluated: usize,
    pub skipped: usize,
}

/// Pieces of a recorded train loss.
#[derive(Clone, Debug)]
pub struct TrainLoss {
    pub total: Var,
    pub label: Var,
    /// Normalized weights.
    pub weights: Var,
    /// Per-pathway feature loss; `None` where the pathway was clipped.
    pub pathway_losses: Vec<Option<Var>>,
    pub logits: Var,
}

/// Everything needed to record a weighted train loss.
pub struct TrainInputs<'a> {
    pub student: &'a StudentState,
    pub theta: &'a BoundTheta,
    pub images: Var,
    pub labels: &'a [usize],
    /// Teacher taps as graph constants.
    pub teacher_taps: &'a [Var],
}

/// Records the weighted train loss. Pathways masked out by clipping are
/// never evaluated; their raw weights still take part in normalization.
pub fn train_loss(
    g: &mut Graph,
    inputs: &TrainInputs<'_>,
    weights: Weights<'_>,
    spec: &LossSpec,
    stats: &mut LossStats,
) -> Result<TrainLoss> {
    let pathways = &inputs.student.pathways;
    let (weights, raw): (Var, Vec<f64>) = match weights {
        Weights::Raw(raw) => {
            let values = g.value(raw).data().to_vec();
            (normalize_graph(g, raw, spec.normalization, spec.bias)?, values)
        }
        Weights::Normalized { weights, raw } => (weights, raw.to_vec()),
    };
    if g.shape(weights) != [pathways.len()] || raw.len() != pathways.len() {
        return Err(Error::Contract(format!(
            "{} pathway weights for {} pathways",
            g.shape(weights)[0],
            pathways.len()
        )));
    }
    let (logits, student_taps) = inputs.student.net.forward(g, &inputs.theta.net, inputs.images)?;
    let label = g.cross_entropy(logits, inputs.labels)?;

    let mask = if spec.clip {
        active_mask(&raw, spec.tau)
    } else {
        vec![true; raw.len()]
    };
    let mut pathway_losses = Vec::with_capacity(pathways.len());
    let mut terms = Vec::new();
    for (p, entry) in pathways.entries.iter().enumerate() {
        if !mask[p] {
            stats.skipped += 1;
            pathway_losses.push(None);
            continue;
        }
        stats.evaluated += 1;
        let l = pathways::pathway_loss(
            g,
            entry,
            &inputs.theta.blocks[p],
            &student_taps,
            inputs.teacher_taps,
            spec.feature,
        )
        .map_err(|e| match e {
            Error::Numeric(msg) => Error::Numeric(format!("pathway {}: {msg}", entry.id())),
            other => other,
        })?;
        terms.push((p, l));
        pathway_losses.push(Some(l));
    }
    let total = if terms.is_empty() {
        label
    } else {
        let kd = g.weighted_sum(weights, &terms)?;
        g.add(label, kd)?
    };
    Ok(TrainLoss {
        total,
        label,
        weights,
        pathway_losses,
        logits,
    })
}

/// Mean cross-entropy of the student on a labeled batch.
pub fn val_loss(g: &mut Graph, net: &Network, params: &[Var], images: Var, labels: &[usize]) -> Result<Var> {
    let (logits, _) = net.forward(g, params, images)?;
    g.cross_entropy(logits, labels)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::{grad_check, GradCheck};
    use crate::networks::NetworkSpec;
    use crate::pathways::TransformKind;
    use crate::rng::{self, Stream};
    use proptest::prelude::*;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    #[test]
    fn closed_form_normalizations() {
        let e = std::f64::consts::E;
        let b = normalize_alpha(&[0.0, 0.0], Normalization::BiasedSoftmax, 1.0).unwrap();
        for v in &b {
            assert!(close(*v, 1.0 / (2.0 + e), 1e-15), "{v}");
        }
        assert!(close(1.0 / (2.0 + e), 0.21194, 1e-5));

        let s = normalize_alpha(&[2f64.ln(), 2f64.ln()], Normalization::Softmax, 1.0).unwrap();
        assert_eq!(s, vec![0.5, 0.5]);
        assert_eq!(normalize_alpha(&[0.0], Normalization::Sigmoid, 1.0).unwrap(), vec![0.5]);
        assert_eq!(
            normalize_alpha(&[1.0, -3.0], Normalization::L1Plus1, 1.0).unwrap(),
            vec![0.2, -0.6]
        );
        assert_eq!(normalize_alpha(&[1.0, -3.0], Normalization::L1, 1.0).unwrap(), vec![0.25, -0.75]);
        assert!("tanh".parse::<Normalization>().is_err());
        for n in Normalization::ALL {
            assert_eq!(n.to_string().parse::<Normalization>().unwrap(), n);
        }
    }

    #[test]
    fn active_mask_threshold() {
        assert_eq!(active_mask(&[1.0, 0.5, 0.2], 0.5), vec![true, false, false]);
    }

    proptest! {
        #[test]
        fn biased_softmax_mass_is_conserved(raw in prop::collection::vec(-20.0f64..20.0, 1..40), g in -3.0f64..3.0) {
            let a = AlphaState::new(raw, Normalization::BiasedSoftmax, g).unwrap();
            let sum: f64 = a.normalized.iter().sum();
            prop_assert!(sum < 1.0);
            prop_assert!(a.normalized.iter().all(|&v| v > 0.0 && v < 1.0));
            prop_assert!((sum + a.bias_mass() - 1.0).abs() < 1e-12);
        }

        #[test]
        fn biased_softmax_is_monotone(raw in prop::collection::vec(-5.0f64..5.0, 2..12), idx in 0usize..12, bump in 0.01f64..2.0) {
            let idx = idx % raw.len();
            let before = normalize_alpha(&raw, Normalization::BiasedSoftmax, 1.0).unwrap();
            let mut up = raw.clone();
            up[idx] += bump;
            let after = normalize_alpha(&up, Normalization::BiasedSoftmax, 1.0).unwrap();
            for p in 0..raw.len() {
                if p == idx {
                    prop_assert!(after[p] > before[p]);
                } else {
                    prop_assert!(after[p] < before[p]);
                }
            }
        }
    }

    #[test]
    fn normalization_gradients() {
        let raw = Tensor::from_vec(vec![0.7, -0.4, 1.3, 0.2]);
        for n in Normalization::ALL {
            let weights = Tensor::from_vec(vec![0.3, -1.1, 0.8, 2.0]);
            let report = grad_check(
                |g, v| {
                    let a = normalize_graph(g, v[0], n, 1.0)?;
                    let w = g.constant(weights.clone())?;
                    let prod = g.mul(a, w)?;
                    g.sum(prod)
                },
                std::slice::from_ref(&raw),
                GradCheck::default(),
            )
            .unwrap();
            assert!(report.passed(), "{n}: {report}");
        }
    }

    pub(crate) fn toy_student(seed: u64) -> (StudentState, Network) {
        let s: NetworkSpec = "input=1x8x8 layers=conv3,relu,pool2,conv4,relu,pool2,gap,linear taps=2,5 classes=3"
            .parse()
            .unwrap();
        let t: NetworkSpec = "input=1x8x8 layers=conv4,relu,pool2,conv6,relu,pool2,gap,linear taps=2,5 classes=3"
            .parse()
            .unwrap();
        let net = Network::build(s.clone(), seed, Stream::StudentInit).unwrap();
        let teacher = Network::build(t.clone(), seed, Stream::TeacherInit).unwrap();
        let pathways = PathwaySet::enumerate(&s, &t, &[TransformKind::PlainConv], seed).unwrap();
        (StudentState { net, pathways }, teacher)
    }

    struct Fixture {
        student: StudentState,
        teacher_taps: Vec<Tensor>,
        x: Tensor,
        labels: Vec<usize>,
    }

    fn fixture() -> Fixture {
        let (student, teacher) = toy_student(4);
        let x = crate::networks::uniform(&[3, 1, 8, 8], 1.0, &mut rng::stream(4, Stream::Data));
        let (_, teacher_taps) = teacher.forward_with_taps(&x).unwrap();
        Fixture {
            student,
            teacher_taps,
            x,
            labels: vec![0, 2, 1],
        }
    }

    fn eval(f: &Fixture, raw: &[f64], spec: &LossSpec, stats: &mut LossStats) -> (f64, f64, Vec<Option<f64>>, Vec<f64>) {
        let mut g = Graph::new();
        let theta = f.student.bind(&mut g, &f.student.theta(), true).unwrap();
        let images = g.constant(f.x.clone()).unwrap();
        let tt: Vec<Var> = f.teacher_taps.iter().map(|t| g.constant(t.clone()).unwrap()).collect();
        let r = g.constant(Tensor::from_vec(raw.to_vec())).unwrap();
        let inputs = TrainInputs {
            student: &f.student,
            theta: &theta,
            images,
            labels: &f.labels,
            teacher_taps: &tt,
        };
        let out = train_loss(&mut g, &inputs, Weights::Raw(r), spec, stats).unwrap();
        (
            g.value(out.total).item(),
            g.value(out.label).item(),
            out.pathway_losses.iter().map(|l| l.map(|v| g.value(v).item())).collect(),
            g.value(out.weights).data().to_vec(),
        )
    }

    #[test]
    fn total_decomposes_into_label_plus_weighted_pathways() {
        let f = fixture();
        let spec = LossSpec {
            clip: false,
            ..LossSpec::default()
        };
        let raw = [0.3, 1.7, -0.2, 0.9];
        let (total, label, losses, w) = eval(&f, &raw, &spec, &mut LossStats::default());
        let dot: f64 = losses.iter().zip(&w).map(|(l, w)| l.unwrap() * w).sum();
        assert!((total - (label + dot)).abs() < 1e-10);
        assert!(losses.iter().all(|l| l.unwrap() > 0.0));
    }

    #[test]
    fn vanishing_weights_leave_label_loss() {
        let f = fixture();
        let spec = LossSpec {
            clip: false,
            ..LossSpec::default()
        };
        let (total, label, _, w) = eval(&f, &[-800.0; 4], &spec, &mut LossStats::default());
        assert!(w.iter().all(|&v| v == 0.0));
        assert_eq!(total, label);
    }

    #[test]
    fn clipping_skips_and_matches_unclipped_when_all_active() {
        let f = fixture();
        let on = LossSpec::default();
        let off = LossSpec { clip: false, ..on };
        let raw = [1.0, 0.9, 2.0, 0.6];
        let mut s_on = LossStats::default();
        let a = eval(&f, &raw, &on, &mut s_on);
        let b = eval(&f, &raw, &off, &mut LossStats::default());
        assert_eq!(a.0.to_bits(), b.0.to_bits());
        assert_eq!(s_on, LossStats { evaluated: 4, skipped: 0 });

        let mut s = LossStats::default();
        let (total, label, losses, _) = eval(&f, &[1.0, 0.5, 0.2, 0.8], &on, &mut s);
        assert_eq!(s, LossStats { evaluated: 2, skipped: 2 });
        assert!(losses[1].is_none() && losses[2].is_none());
        assert!(total > label);

        let (total, label, _, _) = eval(&f, &[0.1; 4], &on, &mut LossStats::default());
        assert_eq!(total, label);
    }

    #[test]
    fn clipped_pathway_block_gets_zero_gradient() {
        let f = fixture();
        let mut g = Graph::new();
        let theta = f.student.bind(&mut g, &f.student.theta(), true).unwrap();
        let images = g.constant(f.x.clone()).unwrap();
        let tt: Vec<Var> = f.teacher_taps.iter().map(|t| g.constant(t.clone()).unwrap()).collect();
        let r = g.constant(Tensor::from_vec(vec![1.0, 0.3, 1.0, 1.0])).unwrap();
        let inputs = TrainInputs {
            student: &f.student,
            theta: &theta,
            images,
            labels: &f.labels,
            teacher_taps: &tt,
        };
        let out = train_loss(&mut g, &inputs, Weights::Raw(r), &LossSpec::default(), &mut LossStats::default()).unwrap();
        let grads = g.backward(out.total).unwrap();
        for &v in &theta.blocks[1] {
            assert!(grads.get(v).is_none_or(|t| t.data().iter().all(|&x| x == 0.0)));
        }
        assert!(theta.blocks[0].iter().any(|&v| grads.get(v).is_some()));
        assert!(tt.iter().all(|&v| grads.get(v).is_none()));
    }

    #[test]
    fn train_loss_gradients_wrt_theta_and_raw_weights() {
        let f = fixture();
        let spec = LossSpec {
            clip: false,
            ..LossSpec::default()
        };
        let raw = Tensor::from_vec(vec![0.8, 1.2, 0.4, 1.0]);
        let mut params = vec![raw];
        params.extend(f.student.theta().0);
        let report = grad_check(
            |g, v| {
                let theta = BoundTheta {
                    net: v[1..1 + f.student.net_tensors()].to_vec(),
                    blocks: {
                        let mut rest = &v[1 + f.student.net_tensors()..];
                        f.student
                            .pathways
                            .param_counts()
                            .iter()
                            .map(|&c| {
                                let (head, tail) = rest.split_at(c);
                                rest = tail;
                                head.to_vec()
                            })
                            .collect()
                    },
                };
                let images = g.constant(f.x.clone())?;
                let tt: Vec<Var> = f.teacher_taps.iter().map(|t| g.constant(t.clone())).collect::<Result<_>>()?;
                let inputs = TrainInputs {
                    student: &f.student,
                    theta: &theta,
                    images,
                    labels: &f.labels,
                    teacher_taps: &tt,
                };
                Ok(train_loss(g, &inputs, Weights::Raw(v[0]), &spec, &mut LossStats::default())?.total)
            },
            &params,
            GradCheck::default(),
        )
        .unwrap();
        assert!(report.passed(), "{report}");
    }

    #[test]
    fn val_loss_values() {
        let spec: NetworkSpec = "input=3x1x1 layers=linear taps= classes=3".parse().unwrap();
        let net = Network::from_params(spec, vec![Tensor::zeros(&[3, 3]), Tensor::zeros(&[3])]).unwrap();
        let mut g = Graph::new();
        let p = net.bind(&mut g, false).unwrap();
        let x = g.constant(Tensor::ones(&[2, 3, 1, 1])).unwrap();
        let l = val_loss(&mut g, &net, &p, x, &[0, 2]).unwrap();
        assert!((g.value(l).item() - 3f64.ln()).abs() < 1e-15);

        let mut eye = Tensor::zeros(&[3, 3]);
        for i in 0..3 {
            eye.data_mut()[i * 4] = 60.0;
        }
        let net = Network::from_params(net.spec().clone(), vec![eye, Tensor::zeros(&[3])]).unwrap();
        let mut g = Graph::new();
        let p = net.bind(&mut g, false).unwrap();
        let x = g.constant(Tensor::new(&[1, 3, 1, 1], vec![0.0, 1.0, 0.0]).unwrap()).unwrap();
        let l = val_loss(&mut g, &net, &p, x, &[1]).unwrap();
        assert!(g.value(l).item() < 1e-20);
    }
}
