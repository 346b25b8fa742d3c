//! Small layered CNNs that expose intermediate feature maps ("taps").

use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use rand::Rng;

use crate::autodiff::{Graph, Tensor, Var};
use crate::data::{BatchCycler, Dataset};
use crate::error::{Error, Result};
use crate::optim::{cosine_lr, ParamVec, Sgd};
use crate::rng::{self, Stream};

const DPCK_MAGIC: &[u8; 4] = b"DPCK";
const DPCK_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Layer {
    /// Stride-1 "same" convolution with a square odd kernel.
    Conv { out: usize, kernel: usize },
    Relu,
    /// Average pooling, window = stride.
    Pool(usize),
    /// Global average pooling to `[C, 1, 1]`.
    GlobalPool,
    /// Fully connected layer on the flattened input. `None` means
    /// `num_classes` outputs.
    Linear { out: Option<usize> },
}

impl Layer {
    fn has_params(&self) -> bool {
        matches!(self, Layer::Conv { .. } | Layer::Linear { .. })
    }
}

impl fmt::Display for Layer {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Layer::Conv { out, kernel: 3 } => write!(f, "conv{out}"),
            Layer::Conv { out, kernel } => write!(f, "conv{out}k{kernel}"),
            Layer::Relu => write!(f, "relu"),
            Layer::Pool(k) => write!(f, "pool{k}"),
            Layer::GlobalPool => write!(f, "gap"),
            Layer::Linear { out: None } => write!(f, "linear"),
            Layer::Linear { out: Some(n) } => write!(f, "linear{n}"),
        }
    }
}

impl FromStr for Layer {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let num = |t: &str| -> Result<usize> {
            t.parse::<usize>()
                .ok()
                .filter(|&v| v > 0)
                .ok_or_else(|| Error::Spec(format!("bad layer {s:?}")))
        };
        match s {
            "relu" => Ok(Layer::Relu),
            "gap" => Ok(Layer::GlobalPool),
            "linear" => Ok(Layer::Linear { out: None }),
            _ if s.starts_with("conv") => {
                let rest = &s[4..];
                let (out, kernel) = match rest.split_once('k') {
                    Some((o, k)) => (num(o)?, num(k)?),
                    None => (num(rest)?, 3),
                };
                if kernel % 2 == 0 {
                    return Err(Error::Spec(format!("conv kernel must be odd in {s:?}")));
                }
                Ok(Layer::Conv { out, kernel })
            }
            _ if s.starts_with("pool") => Ok(Layer::Pool(num(&s[4..])?)),
            _ if s.starts_with("linear") => Ok(Layer::Linear { out: Some(num(&s[6..])?) }),
            _ => Err(Error::Spec(format!("unknown layer {s:?}"))),
        }
    }
}

/// Architecture plus the layer indices whose outputs are taps.
///
/// Canonical text form (one line):
/// `input=1x16x16 layers=conv8,relu,pool2,gap,linear taps=2 classes=4`
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct NetworkSpec {
    /// `(C, H, W)` of one input.
    pub input: [usize; 3],
    pub layers: Vec<Layer>,
    pub taps: Vec<usize>,
    pub num_classes: usize,
}

impl NetworkSpec {
    /// Teacher with three conv stages (16/32/64 channels), tapped after each
    /// downsampling.
    pub fn reference_teacher() -> Self {
        Self::staged(&[16, 32, 64], 16, 4)
    }

    /// Student with three conv stages (8/16/32 channels).
    pub fn reference_student() -> Self {
        Self::staged(&[8, 16, 32], 16, 4)
    }

    /// `conv-relu-pool2` per entry of `channels`, then global pooling and a
    /// linear classifier. Taps sit after every pooling layer.
    pub fn staged(channels: &[usize], size: usize, num_classes: usize) -> Self {
        let mut layers = Vec::new();
        let mut taps = Vec::new();
        for &c in channels {
            layers.extend([Layer::Conv { out: c, kernel: 3 }, Layer::Relu, Layer::Pool(2)]);
            taps.push(layers.len() - 1);
        }
        layers.extend([Layer::GlobalPool, Layer::Linear { out: None }]);
        NetworkSpec {
            input: [1, size, size],
            layers,
            taps,
            num_classes,
        }
    }

    /// Per-sample output shape of every layer: `[C, H, W]` or `[D]`.
    pub fn layer_shapes(&self) -> Result<Vec<Vec<usize>>> {
        let mut cur = self.input.to_vec();
        if cur.iter().any(|&d| d == 0) {
            return Err(Error::Spec(format!("input shape {:?} has a zero extent", self.input)));
        }
        let mut out = Vec::with_capacity(self.layers.len());
        for (i, layer) in self.layers.iter().enumerate() {
            let spatial = cur.len() == 3;
            cur = match *layer {
                Layer::Conv { out, .. } if spatial => vec![out, cur[1], cur[2]],
                Layer::Pool(k) if spatial && cur[1] >= k && cur[2] >= k => vec![cur[0], cur[1] / k, cur[2] / k],
                Layer::GlobalPool if spatial => vec![cur[0], 1, 1],
                Layer::Relu => cur,
                Layer::Linear { out } => vec![out.unwrap_or(self.num_classes)],
                _ => {
                    return Err(Error::Spec(format!(
                        "layer {i} ({layer}) cannot take input of shape {cur:?}"
                    )))
                }
            };
            out.push(cur.clone());
        }
        Ok(out)
    }

    /// Per-sample `[C, H, W]` of every tap, in tap order.
    pub fn tap_shapes(&self) -> Result<Vec<[usize; 3]>> {
        let shapes = self.layer_shapes()?;
        self.taps
            .iter()
            .map(|&t| match shapes.get(t).map(Vec::as_slice) {
                Some(&[c, h, w]) => Ok([c, h, w]),
                _ => Err(Error::Spec(format!("tap {t} is not a spatial feature map"))),
            })
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        if self.layers.is_empty() {
            return Err(Error::Spec("no layers".into()));
        }
        if self.num_classes == 0 {
            return Err(Error::Spec("num_classes must be >= 1".into()));
        }
        if self.taps.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Spec(format!("taps {:?} not strictly increasing", self.taps)));
        }
        if let Some(&t) = self.taps.iter().find(|&&t| t >= self.layers.len()) {
            return Err(Error::Spec(format!("tap {t} beyond {} layers", self.layers.len())));
        }
        let shapes = self.layer_shapes()?;
        if shapes.last().map(Vec::as_slice) != Some(&[self.num_classes][..]) {
            return Err(Error::Spec(format!(
                "final layer must emit {} logits, emits {:?}",
                self.num_classes,
                shapes.last()
            )));
        }
        self.tap_shapes()?;
        Ok(())
    }

    /// Parameter shapes in binding order: `(weight, bias)` per conv/linear.
    pub fn param_shapes(&self) -> Result<Vec<Vec<usize>>> {
        let shapes = self.layer_shapes()?;
        let mut out = Vec::new();
        let mut prev = self.input.to_vec();
        for (layer, shape) in self.layers.iter().zip(&shapes) {
            match *layer {
                Layer::Conv { out: o, kernel } => {
                    out.push(vec![o, prev[0], kernel, kernel]);
                    out.push(vec![o]);
                }
                Layer::Linear { .. } => {
                    let fan_in: usize = prev.iter().product();
                    out.push(vec![fan_in, shape[0]]);
                    out.push(vec![shape[0]]);
                }
                _ => {}
            }
            prev = shape.clone();
        }
        Ok(out)
    }

    pub fn param_names(&self) -> Vec<String> {
        self.layers
            .iter()
            .enumerate()
            .filter(|(_, l)| l.has_params())
            .flat_map(|(i, _)| [format!("layer{i}.weight"), format!("layer{i}.bias")])
            .collect()
    }
}

impl fmt::Display for NetworkSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let [c, h, w] = self.input;
        let layers: Vec<String> = self.layers.iter().map(Layer::to_string).collect();
        let taps: Vec<String> = self.taps.iter().map(usize::to_string).collect();
        write!(
            f,
            "input={c}x{h}x{w} layers={} taps={} classes={}",
            layers.join(","),
            taps.join(","),
            self.num_classes
        )
    }
}

impl FromStr for NetworkSpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let (mut input, mut layers, mut taps, mut classes) = (None, None, None, None);
        for token in s.split_whitespace() {
            let (k, v) = token
                .split_once('=')
                .ok_or_else(|| Error::Spec(format!("expected key=value, found {token:?}")))?;
            match k {
                "input" => {
                    let dims: Vec<usize> = v
                        .split('x')
                        .map(|d| d.parse().map_err(|_| Error::Spec(format!("bad input dims {v:?}"))))
                        .collect::<Result<_>>()?;
                    let dims: [usize; 3] = dims
                        .try_into()
                        .map_err(|_| Error::Spec(format!("input needs CxHxW, got {v:?}")))?;
                    input = Some(dims);
                }
                "layers" => layers = Some(v.split(',').map(str::parse).collect::<Result<Vec<Layer>>>()?),
                "taps" => {
                    taps = Some(if v.is_empty() {
                        Vec::new()
                    } else {
                        v.split(',')
                            .map(|t| t.parse().map_err(|_| Error::Spec(format!("bad tap {t:?}"))))
                            .collect::<Result<Vec<usize>>>()?
                    })
                }
                "classes" => classes = Some(v.parse().map_err(|_| Error::Spec(format!("bad classes {v:?}")))?),
                _ => return Err(Error::Spec(format!("unknown spec key {k:?}"))),
            }
        }
        let missing = |k: &str| Error::Spec(format!("spec is missing {k:?}"));
        let spec = NetworkSpec {
            input: input.ok_or_else(|| missing("input"))?,
            layers: layers.ok_or_else(|| missing("layers"))?,
            taps: taps.unwrap_or_default(),
            num_classes: classes.ok_or_else(|| missing("classes"))?,
        };
        spec.validate()?;
        Ok(spec)
    }
}

/// A spec with concrete parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct Network {
    spec: NetworkSpec,
    params: Vec<Tensor>,
}

impl Network {
    /// Weights drawn uniformly with fan-in scaling (He bound `sqrt(6/fan_in)`
    /// for convolutions, `sqrt(3/fan_in)` for linear layers); biases zero.
    pub fn build(spec: NetworkSpec, seed: u64, stream: rng::Stream) -> Result<Network> {
        spec.validate()?;
        let mut rng = rng::stream(seed, stream);
        let mut params = Vec::new();
        let mut shapes = spec.param_shapes()?.into_iter();
        for layer in spec.layers.iter().filter(|l| l.has_params()) {
            let w = shapes.next().expect("weight shape");
            let (gain, fan_in) = match layer {
                Layer::Conv { .. } => (6.0, w[1..].iter().product::<usize>()),
                _ => (3.0, w[0]),
            };
            params.push(uniform(&w, (gain / fan_in as f64).sqrt(), &mut rng));
            params.push(Tensor::zeros(&shapes.next().expect("bias shape")));
        }
        Ok(Network { spec, params })
    }

    /// Builds a network from explicit parameters.
    pub fn from_params(spec: NetworkSpec, params: Vec<Tensor>) -> Result<Network> {
        spec.validate()?;
        let shapes = spec.param_shapes()?;
        if shapes.len() != params.len() {
            return Err(Error::Spec(format!(
                "spec needs {} parameter tensors, got {}",
                shapes.len(),
                params.len()
            )));
        }
        for (i, (s, p)) in shapes.iter().zip(&params).enumerate() {
            if s.as_slice() != p.shape() {
                return Err(Error::Spec(format!("parameter {i} has shape {:?}, spec needs {s:?}", p.shape())));
            }
        }
        Ok(Network { spec, params })
    }

    pub fn spec(&self) -> &NetworkSpec {
        &self.spec
    }

    pub fn params(&self) -> &[Tensor] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Tensor] {
        &mut self.params
    }

    pub fn param_vec(&self) -> ParamVec {
        ParamVec(self.params.clone())
    }

    pub fn set_params(&mut self, p: ParamVec) -> Result<()> {
        *self = Network::from_params(self.spec.clone(), p.0)?;
        Ok(())
    }

    pub fn num_params(&self) -> usize {
        self.params.iter().map(Tensor::numel).sum()
    }

    /// Adds every parameter as a leaf.
    pub fn bind(&self, g: &mut Graph, requires_grad: bool) -> Result<Vec<Var>> {
        bind_all(g, &self.params, requires_grad)
    }

    /// Runs all layers. Returns the logits and the tap outputs in tap order.
    pub fn forward(&self, g: &mut Graph, params: &[Var], x: Var) -> Result<(Var, Vec<Var>)> {
        let mut taps = Vec::with_capacity(self.spec.taps.len());
        let out = self.run(g, params, x, self.spec.layers.len() - 1, |i, v| {
            if self.spec.taps.contains(&i) {
                taps.push(v);
            }
        })?;
        Ok((out, taps))
    }

    /// Output of layer `upto` (inclusive), running nothing after it.
    pub fn forward_prefix(&self, g: &mut Graph, params: &[Var], x: Var, upto: usize) -> Result<Var> {
        if upto >= self.spec.layers.len() {
            return Err(Error::Contract(format!("layer {upto} out of range")));
        }
        self.run(g, params, x, upto, |_, _| {})
    }

    fn run(&self, g: &mut Graph, params: &[Var], x: Var, upto: usize, mut visit: impl FnMut(usize, Var)) -> Result<Var> {
        let s = g.shape(x);
        if s.len() != 4 || s[1..] != self.spec.input {
            return Err(Error::dim(
                "network",
                format!("batch {:?} does not match input {:?}", s, self.spec.input),
            ));
        }
        if params.len() != self.params.len() {
            return Err(Error::Contract(format!(
                "network needs {} parameter vars, got {}",
                self.params.len(),
                params.len()
            )));
        }
        let mut p = params.iter().copied();
        let mut cur = x;
        for (i, layer) in self.spec.layers.iter().enumerate().take(upto + 1) {
            cur = match *layer {
                Layer::Conv { kernel, .. } => {
                    let (w, b) = (p.next().unwrap(), p.next().unwrap());
                    g.conv2d(cur, w, Some(b), 1, kernel / 2)?
                }
                Layer::Relu => g.relu(cur)?,
                Layer::Pool(k) => g.avg_pool(cur, k)?,
                Layer::GlobalPool => g.global_avg_pool(cur)?,
                Layer::Linear { .. } => {
                    let (w, b) = (p.next().unwrap(), p.next().unwrap());
                    let n = g.shape(cur)[0];
                    let flat: usize = g.shape(cur)[1..].iter().product();
                    let x2 = if g.shape(cur).len() == 2 { cur } else { g.reshape(cur, &[n, flat])? };
                    let y = g.matmul(x2, w)?;
                    let out = g.shape(b)[0];
                    let b2 = g.reshape(b, &[1, out])?;
                    g.add(y, b2)?
                }
            };
            visit(i, cur);
        }
        Ok(cur)
    }

    /// Value-only forward pass.
    pub fn forward_with_taps(&self, batch: &Tensor) -> Result<(Tensor, Vec<Tensor>)> {
        let mut g = Graph::new();
        let params = self.bind(&mut g, false)?;
        let x = g.constant(batch.clone())?;
        let (logits, taps) = self.forward(&mut g, &params, x)?;
        Ok((
            g.value(logits).clone(),
            taps.into_iter().map(|t| g.value(t).clone()).collect(),
        ))
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut buf = Vec::new();
        buf.extend_from_slice(DPCK_MAGIC);
        buf.extend_from_slice(&DPCK_VERSION.to_le_bytes());
        let spec = self.spec.to_string();
        buf.extend_from_slice(&(spec.len() as u32).to_le_bytes());
        buf.extend_from_slice(spec.as_bytes());
        buf.extend_from_slice(&(self.params.len() as u32).to_le_bytes());
        for (name, t) in self.spec.param_names().iter().zip(&self.params) {
            buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
            buf.extend_from_slice(name.as_bytes());
            buf.extend_from_slice(&(t.rank() as u32).to_le_bytes());
            for &d in t.shape() {
                buf.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for v in t.data() {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        }
        buf
    }

    pub fn decode(bytes: &[u8], origin: &str) -> Result<Network> {
        let mut r = Reader { bytes, pos: 0, origin };
        if r.take(4)? != DPCK_MAGIC {
            return Err(r.fail("bad magic, expected \"DPCK\""));
        }
        let version = r.u32()?;
        if version != DPCK_VERSION {
            return Err(r.fail(&format!("unsupported version {version}")));
        }
        let len = r.u32()? as usize;
        let text = std::str::from_utf8(r.take(len)?).map_err(|_| r.fail("spec is not UTF-8"))?;
        let spec: NetworkSpec = text.parse().map_err(|e: Error| r.fail(&e.to_string()))?;
        let names = spec.param_names();
        let count = r.u32()? as usize;
        if count != names.len() {
            return Err(r.fail(&format!("{count} parameter blobs, spec needs {}", names.len())));
        }
        let mut params = Vec::with_capacity(count);
        for expected in &names {
            let nlen = r.u32()? as usize;
            let name = r.take(nlen)?;
            if name != expected.as_bytes() {
                return Err(r.fail(&format!("parameter {:?} where {expected:?} expected", String::from_utf8_lossy(name))));
            }
            let rank = r.u32()? as usize;
            let shape = (0..rank).map(|_| r.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let numel: usize = shape.iter().product();
            let raw = r.take(numel * 8)?;
            let data = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
            params.push(Tensor::new(&shape, data).map_err(|e| r.fail(&e.to_string()))?);
        }
        if r.pos != bytes.len() {
            return Err(r.fail("trailing bytes"));
        }
        Network::from_params(spec, params).map_err(|e| r.fail(&e.to_string()))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.encode()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Network> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Network::decode(&bytes, &path.display().to_string())
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    origin: &'a str,
}

impl<'a> Reader<'a> {
    fn fail(&self, msg: &str) -> Error {
        Error::format(self.origin, None, format!("{msg} (at byte {})", self.pos))
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(self.fail("truncated"));
        }
        let out = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

pub(crate) fn uniform(shape: &[usize], bound: f64, rng: &mut impl Rng) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(-bound..bound)).collect();
    Tensor::new(shape, data).expect("uniform shape")
}

pub(crate) fn bind_all(g: &mut Graph, params: &[Tensor], requires_grad: bool) -> Result<Vec<Var>> {
    params.iter().map(|t| g.leaf(t.clone(), requires_grad)).collect()
}

/// Settings for supervised training of a standalone network.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub momentum: f64,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 10,
            lr: 0.05,
            momentum: 0.9,
            batch_size: 64,
            seed: 0,
        }
    }
}

/// Supervised cross-entropy training with momentum SGD and cosine decay.
/// Returns the trained network and the per-step training loss.
pub fn pretrain(net: Network, data: &Dataset, cfg: &TrainConfig) -> Result<(Network, Vec<f64>)> {
    let mut net = net;
    let mut batches = BatchCycler::new(data.len(), cfg.batch_size, rng::stream(cfg.seed, Stream::TeacherBatches));
    let total = cfg.epochs * batches.batches_per_epoch().max(1);
    let mut opt = Sgd::new(cfg.momentum);
    let mut params = net.param_vec();
    let mut losses = Vec::with_capacity(total);
    for step in 0..total {
        let batch = data.batch(&batches.next_indices());
        let mut g = Graph::new();
        let vars = bind_all(&mut g, &params.0, true)?;
        let step_err = |e: Error| Error::Numeric(format!("pretraining diverged at step {step}: {e}"));
        let x = g.constant(batch.images)?;
        let (logits, _) = net.forward(&mut g, &vars, x)?;
        let loss = g.cross_entropy(logits, &batch.labels).map_err(step_err)?;
        let mut grads = g.backward(loss)?;
        let grads = ParamVec(
            vars.iter()
                .zip(&params.0)
                .map(|(&v, t)| grads.take_or_zeros(v, t.shape()))
                .collect(),
        );
        if !grads.all_finite() {
            return Err(Error::Numeric(format!("non-finite gradient at pretraining step {step}")));
        }
        losses.push(g.value(loss).item());
        opt.step(&mut params, &grads, cosine_lr(cfg.lr, step, total));
    }
    net.set_params(params)?;
    Ok((net, losses))
}
