use super::kernels::{self, ConvGeom, ResizeTable};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Handle to a node inside a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    /// Leaf tensor, or any value computed only from non-differentiable inputs.
    Leaf,
    MatMul(Var, Var),
    Conv2d {
        input: Var,
        kernel: Var,
        bias: Option<Var>,
        geom: ConvGeom,
    },
    Relu(Var),
    Sigmoid(Var),
    Abs(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Softmax {
        input: Var,
        outer: usize,
        axis: usize,
        inner: usize,
    },
    Resize {
        input: Var,
        rows: ResizeTable,
        cols: ResizeTable,
    },
    AvgPool {
        input: Var,
        size: usize,
    },
    GlobalAvgPool(Var),
    CrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Vec<f64>,
    },
    Mse(Var, Var),
    L1(Var, Var),
    Sum(Var),
    Reshape(Var),
    Concat(Vec<Var>),
    Slice {
        input: Var,
        start: usize,
    },
    WeightedSum {
        weights: Var,
        terms: Vec<(usize, Var)>,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Tape of executed ops. Nodes are appended in execution order, so the node
/// list is already a topological order and backward walks it in reverse.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Gradients produced by [`Graph::backward`], indexed by [`Var`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, var: Var) -> Option<&Tensor> {
        self.grads.get(var.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, var: Var) -> Option<Tensor> {
        self.grads.get_mut(var.0).and_then(Option::take)
    }

    /// Gradient for `var`, or zeros of `shape` when nothing flowed into it.
    pub fn take_or_zeros(&mut self, var: Var, shape: &[usize]) -> Tensor {
        self.take(var).unwrap_or_else(|| Tensor::zeros(shape))
    }
}

fn shape_str(s: &[usize]) -> String {
    format!("{s:?}")
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Adds an input tensor. Non-finite values are rejected.
    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Result<Var> {
        if !value.all_finite() {
            return Err(Error::Numeric(format!(
                "non-finite value in leaf of shape {:?}",
                value.shape()
            )));
        }
        Ok(self.push_raw(value, Op::Leaf, requires_grad))
    }

    /// Shorthand for a leaf that does not require gradients.
    pub fn constant(&mut self, value: Tensor) -> Result<Var> {
        self.leaf(value, false)
    }

    fn push_raw(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, name: &'static str, value: Tensor, op: Op, inputs: &[Var]) -> Result<Var> {
        if !value.all_finite() {
            return Err(Error::Numeric(format!("{name} produced a non-finite value")));
        }
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        let op = if requires_grad { op } else { Op::Leaf };
        Ok(self.push_raw(value, op, requires_grad))
    }

    // ---- forward ops ----

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::dim(
                "matmul",
                format!("{} x {}", shape_str(sa), shape_str(sb)),
            ));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let out = kernels::matmul(self.value(a).data(), self.value(b).data(), m, k, n);
        let t = Tensor::new(&[m, n], out)?;
        self.push("matmul", t, Op::MatMul(a, b), &[a, b])
    }

    /// 2-D convolution. `input` is `[N, C, H, W]`, `kernel` is `[O, C, kh, kw]`,
    /// `bias` is `[O]`.
    pub fn conv2d(&mut self, input: Var, kernel: Var, bias: Option<Var>, stride: usize, pad: usize) -> Result<Var> {
        let (si, sk) = (self.shape(input), self.shape(kernel));
        let mismatch = || {
            Error::dim(
                "conv2d",
                format!("input {} kernel {}", shape_str(si), shape_str(sk)),
            )
        };
        if si.len() != 4 || sk.len() != 4 || si[1] != sk[1] {
            return Err(mismatch());
        }
        let (Some(oh), Some(ow)) = (
            kernels::conv_out_len(si[2], sk[2], stride, pad),
            kernels::conv_out_len(si[3], sk[3], stride, pad),
        ) else {
            return Err(mismatch());
        };
        if let Some(b) = bias {
            if self.shape(b) != [sk[0]] {
                return Err(Error::dim(
                    "conv2d",
                    format!("bias {} for {} output channels", shape_str(self.shape(b)), sk[0]),
                ));
            }
        }
        let geom = ConvGeom {
            n: si[0],
            c_in: si[1],
            h: si[2],
            w: si[3],
            c_out: sk[0],
            kh: sk[2],
            kw: sk[3],
            stride,
            pad,
            oh,
            ow,
        };
        let out = kernels::conv2d_forward(
            &geom,
            self.value(input).data(),
            self.value(kernel).data(),
            bias.map(|b| self.value(b).data()),
        );
        let t = Tensor::new(&[geom.n, geom.c_out, oh, ow], out)?;
        let mut inputs = vec![input, kernel];
        inputs.extend(bias);
        self.push(
            "conv2d",
            t,
            Op::Conv2d {
                input,
                kernel,
                bias,
                geom,
            },
            &inputs,
        )
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x).map(|v| v.max(0.0));
        self.push("relu", t, Op::Relu(x), &[x])
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x).map(sigmoid);
        self.push("sigmoid", t, Op::Sigmoid(x), &[x])
    }

    pub fn abs(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x).map(f64::abs);
        self.push("abs", t, Op::Abs(x), &[x])
    }

    fn broadcast_shape(&self, op: &'static str, a: Var, b: Var) -> Result<Vec<usize>> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        let bad = || Error::dim(op, format!("{} vs {}", shape_str(sa), shape_str(sb)));
        if sa.len() != sb.len() {
            return Err(bad());
        }
        sa.iter()
            .zip(sb)
            .map(|(&x, &y)| match (x, y) {
                _ if x == y => Ok(x),
                (1, _) => Ok(y),
                (_, 1) => Ok(x),
                _ => Err(bad()),
            })
            .collect()
    }

    fn binary(&mut self, name: &'static str, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, op: Op) -> Result<Var> {
        let shape = self.broadcast_shape(name, a, b)?;
        let (ta, tb) = (self.value(a), self.value(b));
        let data = if ta.shape() == tb.shape() {
            ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect()
        } else {
            let mut data = vec![0.0; shape.iter().product()];
            let sa = kernels::broadcast_strides(ta.shape(), &shape);
            let sb = kernels::broadcast_strides(tb.shape(), &shape);
            let (da, db) = (ta.data(), tb.data());
            kernels::for_each_broadcast(&shape, &sa, &sb, |o, i, j| data[o] = f(da[i], db[j]));
            data
        };
        let t = Tensor::new(&shape, data)?;
        self.push(name, t, op, &[a, b])
    }

    /// Elementwise sum with size-1 broadcasting over equal-rank shapes.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("div", a, b, |x, y| x / y, Op::Div(a, b))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var> {
        let t = self.value(x).map(|v| v * c);
        self.push("scale", t, Op::Scale(x, c), &[x])
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Result<Var> {
        let t = self.value(x).map(|v| v + c);
        self.push("add_scalar", t, Op::AddScalar(x), &[x])
    }

    /// Softmax along `axis`.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(Error::dim("softmax", format!("axis {axis} for {}", shape_str(&shape))));
        }
        let outer = shape[..axis].iter().product();
        let inner = shape[axis + 1..].iter().product();
        let out = kernels::softmax(self.value(x).data(), outer, shape[axis], inner);
        let t = Tensor::new(&shape, out)?;
        self.push(
            "softmax",
            t,
            Op::Softmax {
                input: x,
                outer,
                axis: shape[axis],
                inner,
            },
            &[x],
        )
    }

    /// Bilinear resize of `[N, C, H, W]` to `[N, C, out_h, out_w]` with
    /// aligned corners.
    pub fn resize_bilinear(&mut self, x: Var, out_h: usize, out_w: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 4 || out_h == 0 || out_w == 0 {
            return Err(Error::dim(
                "resize_bilinear",
                format!("{} to {out_h}x{out_w}", shape_str(&s)),
            ));
        }
        let rows = ResizeTable::new(s[2], out_h);
        let cols = ResizeTable::new(s[3], out_w);
        let out = kernels::resize_forward(self.value(x).data(), s[0] * s[1], (s[2], s[3]), &rows, &cols);
        let t = Tensor::new(&[s[0], s[1], out_h, out_w], out)?;
        self.push("resize_bilinear", t, Op::Resize { input: x, rows, cols }, &[x])
    }

    /// Average pooling with window and stride `size`; trailing rows/columns
    /// that do not fill a window are dropped.
    pub fn avg_pool(&mut self, x: Var, size: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 4 || size == 0 || s[2] < size || s[3] < size {
            return Err(Error::dim("avg_pool", format!("window {size} on {}", shape_str(&s))));
        }
        let out = kernels::avg_pool_forward(self.value(x).data(), s[0] * s[1], (s[2], s[3]), size);
        let t = Tensor::new(&[s[0], s[1], s[2] / size, s[3] / size], out)?;
        self.push("avg_pool", t, Op::AvgPool { input: x, size }, &[x])
    }

    /// `[N, C, H, W]` -> `[N, C, 1, 1]`.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 4 {
            return Err(Error::dim("global_avg_pool", shape_str(&s)));
        }
        let plane = s[2] * s[3];
        let out = self
            .value(x)
            .data()
            .chunks(plane)
            .map(|c| c.iter().sum::<f64>() / plane as f64)
            .collect();
        let t = Tensor::new(&[s[0], s[1], 1, 1], out)?;
        self.push("global_avg_pool", t, Op::GlobalAvgPool(x), &[x])
    }

    /// Mean softmax cross-entropy of `[N, classes]` logits against labels.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let s = self.shape(logits).to_vec();
        if s.len() != 2 || s[0] != labels.len() {
            return Err(Error::dim(
                "cross_entropy",
                format!("logits {} with {} labels", shape_str(&s), labels.len()),
            ));
        }
        if let Some(&bad) = labels.iter().find(|&&y| y >= s[1]) {
            return Err(Error::dim("cross_entropy", format!("label {bad} >= {} classes", s[1])));
        }
        let (loss, probs) = kernels::cross_entropy(self.value(logits).data(), labels, s[1]);
        self.push(
            "cross_entropy",
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
            &[logits],
        )
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::dim(
                op,
                format!("{} vs {}", shape_str(self.shape(a)), shape_str(self.shape(b))),
            ));
        }
        Ok(())
    }

    /// Mean squared difference over all elements.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mse", a, b)?;
        let (ta, tb) = (self.value(a), self.value(b));
        let total: f64 = ta.data().iter().zip(tb.data()).map(|(x, y)| (x - y) * (x - y)).sum();
        let t = Tensor::scalar(total / ta.numel() as f64);
        self.push("mse", t, Op::Mse(a, b), &[a, b])
    }

    /// Mean absolute difference over all elements.
    pub fn l1(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("l1", a, b)?;
        let (ta, tb) = (self.value(a), self.value(b));
        let total: f64 = ta.data().iter().zip(tb.data()).map(|(x, y)| (x - y).abs()).sum();
        let t = Tensor::scalar(total / ta.numel() as f64);
        self.push("l1", t, Op::L1(a, b), &[a, b])
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let t = Tensor::scalar(self.value(x).sum());
        self.push("sum", t, Op::Sum(x), &[x])
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(x).reshape(shape)?;
        self.push("reshape", t, Op::Reshape(x), &[x])
    }

    /// Concatenates 1-D tensors.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::dim("concat", "no inputs"));
        }
        let mut data = Vec::new();
        for &p in parts {
            if self.shape(p).len() != 1 {
                return Err(Error::dim("concat", format!("input {} is not 1-D", shape_str(self.shape(p)))));
            }
            data.extend_from_slice(self.value(p).data());
        }
        let t = Tensor::from_vec(data);
        self.push("concat", t, Op::Concat(parts.to_vec()), parts)
    }

    /// Elements `[start, start + len)` of a 1-D tensor.
    pub fn slice(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let s = self.shape(x);
        if s.len() != 1 || len == 0 || start + len > s[0] {
            return Err(Error::dim(
                "slice",
                format!("[{start}, {}) of {}", start + len, shape_str(s)),
            ));
        }
        let t = Tensor::from_vec(self.value(x).data()[start..start + len].to_vec());
        self.push("slice", t, Op::Slice { input: x, start }, &[x])
    }

    /// `sum_i weights[index_i] * term_i` for scalar terms. An empty term
    /// list yields zero.
    pub fn weighted_sum(&mut self, weights: Var, terms: &[(usize, Var)]) -> Result<Var> {
        let w = self.value(weights);
        if w.rank() != 1 {
            return Err(Error::dim("weighted_sum", format!("weights {}", shape_str(w.shape()))));
        }
        let mut total = 0.0;
        for &(i, t) in terms {
            if i >= w.numel() || !self.value(t).is_scalar() {
                return Err(Error::dim(
                    "weighted_sum",
                    format!("term ({i}, {}) with {} weights", shape_str(self.shape(t)), w.numel()),
                ));
            }
            total += w.data()[i] * self.value(t).item();
        }
        let mut inputs = vec![weights];
        inputs.extend(terms.iter().map(|&(_, t)| t));
        self.push(
            "weighted_sum",
            Tensor::scalar(total),
            Op::WeightedSum {
                weights,
                terms: terms.to_vec(),
            },
            &inputs,
        )
    }

    // ---- backward ----

    /// Reverse-mode sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if !self.value(loss).is_scalar() {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        if !self.nodes[loss.0].requires_grad {
            return Ok(Gradients { grads });
        }
        grads[loss.0] = Some(Tensor::new(self.shape(loss), vec![1.0])?);
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.backprop_node(node, &g, &mut grads)?;
            grads[idx] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], v: Var, data: Vec<f64>) {
        if !self.wants(v) {
            return;
        }
        let shape = self.shape(v);
        match &mut grads[v.0] {
            Some(existing) => {
                for (a, b) in existing.data_mut().iter_mut().zip(&data) {
                    *a += b;
                }
            }
            slot @ None => *slot = Some(Tensor::new(shape, data).expect("gradient shape")),
        }
    }

    /// Sums a broadcast gradient back down to `target`'s shape.
    fn reduce_to(&self, target: Var, out_shape: &[usize], g: &[f64], scale: impl Fn(usize, usize) -> f64) -> Vec<f64> {
        let ts = self.shape(target);
        let mut acc = vec![0.0; ts.iter().product()];
        if ts == out_shape {
            for (i, a) in acc.iter_mut().enumerate() {
                *a = g[i] * scale(i, i);
            }
            return acc;
        }
        let st = kernels::broadcast_strides(ts, out_shape);
        let contiguous: Vec<usize> = {
            let mut s = vec![0; out_shape.len()];
            let mut a = 1;
            for d in (0..out_shape.len()).rev() {
                s[d] = a;
                a *= out_shape[d];
            }
            s
        };
        kernels::for_each_broadcast(out_shape, &st, &contiguous, |o, t, _| acc[t] += g[o] * scale(o, t));
        acc
    }

    fn backprop_node(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        let gd = g.data();
        let out_shape = node.value.shape();
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (sa, sb) = (self.shape(*a), self.shape(*b));
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                if self.wants(*a) {
                    let bt = kernels::transpose(self.value(*b).data(), k, n);
                    self.accumulate(grads, *a, kernels::matmul(gd, &bt, m, n, k));
                }
                if self.wants(*b) {
                    let at = kernels::transpose(self.value(*a).data(), m, k);
                    self.accumulate(grads, *b, kernels::matmul(&at, gd, k, m, n));
                }
            }
            Op::Conv2d {
                input,
                kernel,
                bias,
                geom,
            } => {
                let (gi, gk, gb) = kernels::conv2d_backward(
                    geom,
                    self.value(*input).data(),
                    self.value(*kernel).data(),
                    gd,
                    self.wants(*input),
                    self.wants(*kernel),
                );
                self.accumulate(grads, *input, gi);
                self.accumulate(grads, *kernel, gk);
                if let Some(b) = bias {
                    self.accumulate(grads, *b, gb);
                }
            }
            Op::Relu(x) => {
                let xv = self.value(*x).data();
                let d = gd.iter().zip(xv).map(|(g, &v)| if v > 0.0 { *g } else { 0.0 }).collect();
                self.accumulate(grads, *x, d);
            }
            Op::Sigmoid(x) => {
                let y = node.value.data();
                let d = gd.iter().zip(y).map(|(g, &s)| g * s * (1.0 - s)).collect();
                self.accumulate(grads, *x, d);
            }
            Op::Abs(x) => {
                let xv = self.value(*x).data();
                let d = gd.iter().zip(xv).map(|(g, &v)| g * sign(v)).collect();
                self.accumulate(grads, *x, d);
            }
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    if self.wants(v) {
                        let d = self.reduce_to(v, out_shape, gd, |_, _| 1.0);
                        self.accumulate(grads, v, d);
                    }
                }
            }
            Op::Sub(a, b) => {
                if self.wants(*a) {
                    let d = self.reduce_to(*a, out_shape, gd, |_, _| 1.0);
                    self.accumulate(grads, *a, d);
                }
                if self.wants(*b) {
                    let d = self.reduce_to(*b, out_shape, gd, |_, _| -1.0);
                    self.accumulate(grads, *b, d);
                }
            }
            Op::Mul(a, b) | Op::Div(a, b) => {
                let is_div = matches!(node.op, Op::Div(..));
                let (ta, tb) = (self.value(*a), self.value(*b));
                let sa = kernels::broadcast_strides(ta.shape(), out_shape);
                let sb = kernels::broadcast_strides(tb.shape(), out_shape);
                let (da, db) = (ta.data(), tb.data());
                let mut ga = vec![0.0; da.len()];
                let mut gb = vec![0.0; db.len()];
                kernels::for_each_broadcast(out_shape, &sa, &sb, |o, i, j| {
                    if is_div {
                        ga[i] += gd[o] / db[j];
                        gb[j] -= gd[o] * da[i] / (db[j] * db[j]);
                    } else {
                        ga[i] += gd[o] * db[j];
                        gb[j] += gd[o] * da[i];
                    }
                });
                self.accumulate(grads, *a, ga);
                self.accumulate(grads, *b, gb);
            }
            Op::Scale(x, c) => {
                self.accumulate(grads, *x, gd.iter().map(|g| g * c).collect());
            }
            Op::AddScalar(x) => {
                self.accumulate(grads, *x, gd.to_vec());
            }
            Op::Softmax {
                input,
                outer,
                axis,
                inner,
            } => {
                let d = kernels::softmax_backward(node.value.data(), gd, *outer, *axis, *inner);
                self.accumulate(grads, *input, d);
            }
            Op::Resize { input, rows, cols } => {
                let s = self.shape(*input);
                let d = kernels::resize_backward(gd, s[0] * s[1], (s[2], s[3]), rows, cols);
                self.accumulate(grads, *input, d);
            }
            Op::AvgPool { input, size } => {
                let s = self.shape(*input);
                let d = kernels::avg_pool_backward(gd, s[0] * s[1], (s[2], s[3]), *size);
                self.accumulate(grads, *input, d);
            }
            Op::GlobalAvgPool(x) => {
                let s = self.shape(*x);
                let plane = s[2] * s[3];
                let mut d = vec![0.0; s.iter().product()];
                for (chunk, g) in d.chunks_mut(plane).zip(gd) {
                    chunk.iter_mut().for_each(|v| *v = g / plane as f64);
                }
                self.accumulate(grads, *x, d);
            }
            Op::CrossEntropy { logits, labels, probs } => {
                let classes = self.shape(*logits)[1];
                let scale = gd[0] / labels.len() as f64;
                let mut d: Vec<f64> = probs.iter().map(|p| p * scale).collect();
                for (r, &y) in labels.iter().enumerate() {
                    d[r * classes + y] -= scale;
                }
                self.accumulate(grads, *logits, d);
            }
            Op::Mse(a, b) | Op::L1(a, b) => {
                let is_l1 = matches!(node.op, Op::L1(..));
                let (ta, tb) = (self.value(*a), self.value(*b));
                let scale = gd[0] / ta.numel() as f64;
                let da: Vec<f64> = ta
                    .data()
                    .iter()
                    .zip(tb.data())
                    .map(|(x, y)| if is_l1 { scale * sign(x - y) } else { 2.0 * scale * (x - y) })
                    .collect();
                if self.wants(*b) {
                    self.accumulate(grads, *b, da.iter().map(|v| -v).collect());
                }
                self.accumulate(grads, *a, da);
            }
            Op::Sum(x) => {
                let n = self.value(*x).numel();
                self.accumulate(grads, *x, vec![gd[0]; n]);
            }
            Op::Reshape(x) => {
                self.accumulate(grads, *x, gd.to_vec());
            }
            Op::Concat(parts) => {
                let mut off = 0;
                for &p in parts {
                    let n = self.value(p).numel();
                    self.accumulate(grads, p, gd[off..off + n].to_vec());
                    off += n;
                }
            }
            Op::Slice { input, start } => {
                let mut d = vec![0.0; self.value(*input).numel()];
                d[*start..*start + gd.len()].copy_from_slice(gd);
                self.accumulate(grads, *input, d);
            }
            Op::WeightedSum { weights, terms } => {
                let w = self.value(*weights).data();
                let mut gw = vec![0.0; w.len()];
                for &(i, t) in terms {
                    gw[i] += gd[0] * self.value(t).item();
                    self.accumulate(grads, t, vec![gd[0] * w[i]]);
                }
                self.accumulate(grads, *weights, gw);
            }
        }
        Ok(())
    }
}

pub(crate) fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}
