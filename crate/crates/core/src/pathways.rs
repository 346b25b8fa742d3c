//! Distillation pathways: every (teacher tap, student tap, transform) triple,
//! and the transform blocks that map a student tap onto a teacher tap's
//! shape.

use std::fmt;
use std::str::FromStr;

use crate::autodiff::{Graph, Tensor, Var};
use crate::error::{Error, Result};
use crate::networks::{self, NetworkSpec};
use crate::optim::ParamVec;
use crate::rng::{self, Stream};

/// Feature distance between a transformed student tap and a teacher tap.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FeatureDistance {
    /// Mean absolute difference.
    L1,
    /// Mean squared difference.
    L2,
}

impl FromStr for FeatureDistance {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "l1" => Ok(FeatureDistance::L1),
            "l2" => Ok(FeatureDistance::L2),
            _ => Err(Error::Config(format!("unknown feature distance {s:?} (expected l1 or l2)"))),
        }
    }
}

impl fmt::Display for FeatureDistance {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            FeatureDistance::L1 => "l1",
            FeatureDistance::L2 => "l2",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum TransformKind {
    /// 1x1 channel projection (omitted when channels already agree), then
    /// bilinear resize.
    IdentityResize,
    /// 3x3 conv + ReLU, 1x1 projection, bilinear resize.
    PlainConv,
    /// The plain-conv branch gated by a sigmoid 1-channel attention map
    /// computed from the input by a 1x1 conv, then bilinear resize.
    ConvAttention,
}

impl TransformKind {
    pub const ALL: [TransformKind; 3] = [
        TransformKind::IdentityResize,
        TransformKind::PlainConv,
        TransformKind::ConvAttention,
    ];
}

impl fmt::Display for TransformKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            TransformKind::IdentityResize => "identity-resize",
            TransformKind::PlainConv => "plain-conv",
            TransformKind::ConvAttention => "conv-attention",
        })
    }
}

impl FromStr for TransformKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        TransformKind::ALL
            .into_iter()
            .find(|k| k.to_string() == s)
            .ok_or_else(|| Error::Config(format!("unknown transform kind {s:?}")))
    }
}

/// Trainable alignment from a student tap `[C_s, H_s, W_s]` to a teacher
/// tap shape `target = [C_t, H_t, W_t]`.
#[derive(Clone, Debug, PartialEq)]
pub struct TransformBlock {
    pub kind: TransformKind,
    pub in_channels: usize,
    pub target_shape: [usize; 3],
    pub params: Vec<Tensor>,
}

impl TransformBlock {
    pub fn new(kind: TransformKind, in_channels: usize, target_shape: [usize; 3], rng: &mut impl rand::Rng) -> Self {
        let cs = in_channels;
        let ct = target_shape[0];
        let he = |fan_in: usize| (6.0 / fan_in as f64).sqrt();
        let mut params = Vec::new();
        match kind {
            TransformKind::IdentityResize => {
                if cs != ct {
                    params.push(networks::uniform(&[ct, cs, 1, 1], (3.0 / cs as f64).sqrt(), rng));
                    params.push(Tensor::zeros(&[ct]));
                }
            }
            TransformKind::PlainConv | TransformKind::ConvAttention => {
                params.push(networks::uniform(&[cs, cs, 3, 3], he(cs * 9), rng));
                params.push(Tensor::zeros(&[cs]));
                params.push(networks::uniform(&[ct, cs, 1, 1], (3.0 / cs as f64).sqrt(), rng));
                params.push(Tensor::zeros(&[ct]));
                if kind == TransformKind::ConvAttention {
                    params.push(networks::uniform(&[1, cs, 1, 1], (3.0 / cs as f64).sqrt(), rng));
                    params.push(Tensor::zeros(&[1]));
                }
            }
        }
        TransformBlock {
            kind,
            in_channels,
            target_shape,
            params,
        }
    }

    /// Applies the block to a `[N, C_s, H, W]` feature map. `params` are the
    /// graph leaves for `self.params`.
    pub fn apply(&self, g: &mut Graph, params: &[Var], feat: Var) -> Result<Var> {
        let s = g.shape(feat).to_vec();
        if s.len() != 4 || s[1] != self.in_channels {
            return Err(Error::dim(
                "transform",
                format!("{} block expects {} channels, got {s:?}", self.kind, self.in_channels),
            ));
        }
        if params.len() != self.params.len() {
            return Err(Error::Contract(format!(
                "{} block has {} params, {} vars bound",
                self.kind,
                self.params.len(),
                params.len()
            )));
        }
        let y = match self.kind {
            TransformKind::IdentityResize if params.is_empty() => feat,
            TransformKind::IdentityResize => g.conv2d(feat, params[0], Some(params[1]), 1, 0)?,
            TransformKind::PlainConv | TransformKind::ConvAttention => {
                let h = g.conv2d(feat, params[0], Some(params[1]), 1, 1)?;
                let h = g.relu(h)?;
                let y = g.conv2d(h, params[2], Some(params[3]), 1, 0)?;
                if self.kind == TransformKind::ConvAttention {
                    let logits = g.conv2d(feat, params[4], Some(params[5]), 1, 0)?;
                    let att = g.sigmoid(logits)?;
                    g.mul(y, att)?
                } else {
                    y
                }
            }
        };
        let [_, th, tw] = self.target_shape;
        let ys = g.shape(y);
        if ys[2] == th && ys[3] == tw {
            Ok(y)
        } else {
            g.resize_bilinear(y, th, tw)
        }
    }

    /// The sigmoid attention map for `feat` (conv-attention blocks only).
    pub fn attention_map(&self, feat: &Tensor) -> Result<Option<Tensor>> {
        if self.kind != TransformKind::ConvAttention {
            return Ok(None);
        }
        let mut g = Graph::new();
        let x = g.constant(feat.clone())?;
        let w = g.constant(self.params[4].clone())?;
        let b = g.constant(self.params[5].clone())?;
        let logits = g.conv2d(x, w, Some(b), 1, 0)?;
        let att = g.sigmoid(logits)?;
        Ok(Some(g.value(att).clone()))
    }
}

/// One pathway: teacher tap `teacher`, student tap `student`, transform
/// index `kind_index` into the set's kind list.
#[derive(Clone, Debug, PartialEq)]
pub struct Pathway {
    pub teacher: usize,
    pub student: usize,
    pub kind_index: usize,
    pub block: TransformBlock,
}

impl Pathway {
    /// Identifier of the form `t{i}-s{j}-k{k}`.
    pub fn id(&self) -> String {
        pathway_id(self.teacher, self.student, self.kind_index)
    }
}

pub fn pathway_id(teacher: usize, student: usize, kind: usize) -> String {
    format!("t{teacher}-s{student}-k{kind}")
}

/// Parses a `t{i}-s{j}-k{k}` identifier.
pub fn parse_pathway_id(id: &str) -> Option<(usize, usize, usize)> {
    let mut it = id.split('-');
    let mut part = |prefix: char| -> Option<usize> {
        let p = it.next()?;
        let digits = p.strip_prefix(prefix)?;
        if digits.is_empty() || !digits.bytes().all(|b| b.is_ascii_digit()) {
            return None;
        }
        digits.parse().ok()
    };
    let out = (part('t')?, part('s')?, part('k')?);
    it.next().is_none().then_some(out)
}

/// The search space: all pathways in teacher-major, then student, then
/// kind order.
#[derive(Clone, Debug, PartialEq)]
pub struct PathwaySet {
    pub entries: Vec<Pathway>,
    pub kinds: Vec<TransformKind>,
}

impl PathwaySet {
    /// Cross product of teacher taps x student taps x `kinds`. Tap shapes are
    /// inferred from the specs; both specs must share an input shape.
    pub fn enumerate(student: &NetworkSpec, teacher: &NetworkSpec, kinds: &[TransformKind], seed: u64) -> Result<Self> {
        if student.input != teacher.input {
            return Err(Error::Spec(format!(
                "student input {:?} differs from teacher input {:?}",
                student.input, teacher.input
            )));
        }
        let st = student.tap_shapes()?;
        let tt = teacher.tap_shapes()?;
        if st.is_empty() || tt.is_empty() {
            return Err(Error::Spec("both networks need at least one tap".into()));
        }
        if kinds.is_empty() {
            return Err(Error::Config("no transform kinds given".into()));
        }
        let mut rng = rng::stream(seed, Stream::PathwayInit);
        let mut entries = Vec::with_capacity(tt.len() * st.len() * kinds.len());
        for (i, tshape) in tt.iter().enumerate() {
            for (j, sshape) in st.iter().enumerate() {
                for (k, &kind) in kinds.iter().enumerate() {
                    entries.push(Pathway {
                        teacher: i,
                        student: j,
                        kind_index: k,
                        block: TransformBlock::new(kind, sshape[0], *tshape, &mut rng),
                    });
                }
            }
        }
        Ok(PathwaySet {
            entries,
            kinds: kinds.to_vec(),
        })
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn ids(&self) -> Vec<String> {
        self.entries.iter().map(Pathway::id).collect()
    }

    pub fn num_params(&self) -> usize {
        self.entries
            .iter()
            .flat_map(|e| &e.block.params)
            .map(Tensor::numel)
            .sum()
    }

    /// All block parameters, flattened in entry order.
    pub fn param_vec(&self) -> ParamVec {
        ParamVec(self.entries.iter().flat_map(|e| e.block.params.iter().cloned()).collect())
    }

    pub fn param_counts(&self) -> Vec<usize> {
        self.entries.iter().map(|e| e.block.params.len()).collect()
    }

    pub fn set_params(&mut self, p: Vec<Tensor>) -> Result<()> {
        let total: usize = self.param_counts().iter().sum();
        if p.len() != total {
            return Err(Error::Contract(format!("{total} block tensors expected, got {}", p.len())));
        }
        let mut it = p.into_iter();
        for e in &mut self.entries {
            for slot in &mut e.block.params {
                let t = it.next().unwrap();
                if t.shape() != slot.shape() {
                    return Err(Error::dim("pathway params", format!("{:?} vs {:?}", t.shape(), slot.shape())));
                }
                *slot = t;
            }
        }
        Ok(())
    }
}

/// Feature loss of one pathway: `distance(block(student_tap_j), teacher_tap_i)`.
///
/// `teacher_taps` should be constants; nothing here routes gradients into
/// the teacher.
pub fn pathway_loss(
    g: &mut Graph,
    entry: &Pathway,
    block_params: &[Var],
    student_taps: &[Var],
    teacher_taps: &[Var],
    distance: FeatureDistance,
) -> Result<Var> {
    let (&s, &t) = student_taps
        .get(entry.student)
        .zip(teacher_taps.get(entry.teacher))
        .ok_or_else(|| Error::Contract(format!("pathway {} refers to a missing tap", entry.id())))?;
    let y = entry.block.apply(g, block_params, s)?;
    match distance {
        FeatureDistance::L1 => g.l1(y, t),
        FeatureDistance::L2 => g.mse(y, t),
    }
}
