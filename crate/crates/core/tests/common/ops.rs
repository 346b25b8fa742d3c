#![allow(dead_code)]

use distpro::autodiff::{grad_check, GradCheck, Graph, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.random_range(lo..hi)).collect()).unwrap()
}

/// Values with magnitude in `[0.1, 1]` and random sign, kept away from kinks.
fn away_from_zero(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let m = rng.random_range(0.1..1.0);
            if rng.random_bool(0.5) {
                m
            } else {
                -m
            }
        })
        .collect();
    Tensor::new(shape, data).unwrap()
}

/// Reduces `out` to a scalar through a fixed random projection so that
/// every output element gets a distinct upstream gradient.
fn project(g: &mut Graph, out: Var, seed: u64) -> distpro::Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let w = rand_tensor(&mut rng, g.shape(out), -1.0, 1.0);
    let w = g.constant(w)?;
    let p = g.mul(out, w)?;
    g.sum(p)
}

/// Outcome of one op's gradient check.
pub struct OpCheck {
    pub name: &'static str,
    pub max_rel_error: f64,
    pub passed: bool,
    pub detail: String,
}

fn check(
    out: &mut Vec<OpCheck>,
    name: &'static str,
    params: &[Tensor],
    seed: u64,
    f: impl Fn(&mut Graph, &[Var]) -> distpro::Result<Var>,
) {
    let report = grad_check(
        |g, v| {
            let out = f(g, v)?;
            if g.value(out).is_scalar() {
                Ok(out)
            } else {
                project(g, out, seed)
            }
        },
        params,
        GradCheck::default(),
    )
    .unwrap();
    out.push(OpCheck {
        name,
        max_rel_error: report.max_rel_error(),
        passed: report.passed(),
        detail: format!("{name} (seed {seed}):\n{report}"),
    });
}

pub fn dims(rng: &mut ChaCha8Rng, lo: usize, hi: usize) -> usize {
    rng.random_range(lo..=hi)
}

/// Runs every op's randomized gradient check for one seed.
pub fn all_ops(seed: u64) -> Vec<OpCheck> {
    let mut out = Vec::new();
    let out = &mut out;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (m, k, n) = (dims(&mut rng, 1, 4), dims(&mut rng, 1, 4), dims(&mut rng, 1, 4));
    let a = rand_tensor(&mut rng, &[m, k], -1.0, 1.0);
    let b = rand_tensor(&mut rng, &[k, n], -1.0, 1.0);
    check(out, "matmul", &[a, b], seed, |g, v| g.matmul(v[0], v[1]));

    let (bn, c, h, w, o) = (
        dims(&mut rng, 1, 2),
        dims(&mut rng, 1, 3),
        dims(&mut rng, 3, 6),
        dims(&mut rng, 3, 6),
        dims(&mut rng, 1, 3),
    );
    let kk = dims(&mut rng, 1, 3);
    let stride = dims(&mut rng, 1, 2);
    let pad = dims(&mut rng, 0, 1);
    let x = rand_tensor(&mut rng, &[bn, c, h, w], -1.0, 1.0);
    let kern = rand_tensor(&mut rng, &[o, c, kk, kk], -1.0, 1.0);
    let bias = rand_tensor(&mut rng, &[o], -1.0, 1.0);
    check(out, "conv2d", &[x.clone(), kern.clone(), bias], seed, |g, v| {
        g.conv2d(v[0], v[1], Some(v[2]), stride, pad)
    });
    check(out, "conv2d-nobias", &[x, kern], seed, |g, v| g.conv2d(v[0], v[1], None, stride, pad));

    let shape = [dims(&mut rng, 1, 3), dims(&mut rng, 1, 4), dims(&mut rng, 1, 3)];
    let x = away_from_zero(&mut rng, &shape);
    check(out, "relu", &[x.clone()], seed, |g, v| g.relu(v[0]));
    check(out, "abs", &[x.clone()], seed, |g, v| g.abs(v[0]));
    let s = rand_tensor(&mut rng, &shape, -4.0, 4.0);
    check(out, "sigmoid", &[s.clone()], seed, |g, v| g.sigmoid(v[0]));
    check(out, "scale", &[s.clone()], seed, |g, v| g.scale(v[0], -1.7));
    check(out, "add_scalar", &[s.clone()], seed, |g, v| g.add_scalar(v[0], 0.3));
    check(out, "sum", &[s.clone()], seed, |g, v| g.sum(v[0]));
    let numel: usize = shape.iter().product();
    check(out, "reshape", &[s.clone()], seed, |g, v| g.reshape(v[0], &[numel]));
    let axis = rng.random_range(0..3);
    check(out, "softmax", &[s.clone()], seed, |g, v| g.softmax(v[0], axis));

    // broadcasting: `b` has size-1 extents on a random subset of axes
    let bshape: Vec<usize> = shape.iter().map(|&d| if rng.random_bool(0.5) { 1 } else { d }).collect();
    let y = rand_tensor(&mut rng, &bshape, 0.5, 2.0);
    check(out, "add", &[s.clone(), y.clone()], seed, |g, v| g.add(v[0], v[1]));
    check(out, "sub", &[y.clone(), s.clone()], seed, |g, v| g.sub(v[0], v[1]));
    check(out, "mul", &[s.clone(), y.clone()], seed, |g, v| g.mul(v[0], v[1]));
    check(out, "div", &[s.clone(), y.clone()], seed, |g, v| g.div(v[0], v[1]));

    let t = rand_tensor(&mut rng, &shape, -1.0, 1.0);
    check(out, "mse", &[s.clone(), t.clone()], seed, |g, v| g.mse(v[0], v[1]));
    let gap = away_from_zero(&mut rng, &shape);
    let mut shifted = t.clone();
    shifted.axpy(1.0, &gap);
    check(out, "l1", &[shifted, t], seed, |g, v| g.l1(v[0], v[1]));

    let (hh, ww) = (dims(&mut rng, 1, 4), dims(&mut rng, 1, 4));
    let img = rand_tensor(&mut rng, &[1, 2, hh, ww], -1.0, 1.0);
    let (oh, ow) = (dims(&mut rng, 1, 7), dims(&mut rng, 1, 7));
    check(out, "resize_bilinear", &[img.clone()], seed, |g, v| g.resize_bilinear(v[0], oh, ow));
    check(out, "global_avg_pool", &[img], seed, |g, v| g.global_avg_pool(v[0]));
    let p = dims(&mut rng, 1, 3);
    let img = rand_tensor(&mut rng, &[2, 1, 2 * p, 3 * p], -1.0, 1.0);
    check(out, "avg_pool", &[img], seed, |g, v| g.avg_pool(v[0], p));

    let (bs, classes) = (dims(&mut rng, 1, 4), dims(&mut rng, 2, 5));
    let logits = rand_tensor(&mut rng, &[bs, classes], -3.0, 3.0);
    let labels: Vec<usize> = (0..bs).map(|_| rng.random_range(0..classes)).collect();
    check(out, "cross_entropy", &[logits], seed, |g, v| g.cross_entropy(v[0], &labels));

    let l1 = dims(&mut rng, 1, 4);
    let l2 = dims(&mut rng, 1, 4);
    let u = rand_tensor(&mut rng, &[l1], -1.0, 1.0);
    let z = rand_tensor(&mut rng, &[l2], -1.0, 1.0);
    let start = rng.random_range(0..l1 + l2);
    let len = rng.random_range(1..=l1 + l2 - start);
    check(out, "concat", &[u.clone(), z.clone()], seed, |g, v| g.concat(&[v[0], v[1]]));
    check(out, "slice", &[u.clone(), z.clone()], seed, |g, v| {
        let c = g.concat(&[v[0], v[1]])?;
        g.slice(c, start, len)
    });

    let weights = rand_tensor(&mut rng, &[3], -1.0, 1.0);
    let terms = rand_tensor(&mut rng, &[3], -1.0, 1.0);
    check(out, "weighted_sum", &[weights, terms], seed, |g, v| {
        let parts = (0..3)
            .map(|i| {
                let s = g.slice(v[1], i, 1)?;
                g.sum(s)
            })
            .collect::<distpro::Result<Vec<_>>>()?;
        // skip one index to exercise absent terms
        g.weighted_sum(v[0], &[(0, parts[0]), (2, parts[2])])
    });
    std::mem::take(out)
}
