//! Slow, direct reference computations used to validate the fast paths.
//!
//! Nothing here calls into the autodiff kernels: convolution is a plain
//! loop nest, and the hypergradient reference perturbs the raw weights
//! directly and differences the validation loss after one exact inner step.

use std::fmt;

use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::meta_search::{self, BilevelProblem, EpsilonMode};
use crate::optim::ParamVec;

/// Direct convolution of `input [N,C,H,W]` with `kernel [O,C,KH,KW]`, zero
/// padding `pad` on every side.
pub fn naive_conv(input: &Tensor, kernel: &Tensor, bias: Option<&Tensor>, stride: usize, pad: usize) -> Result<Tensor> {
    let (is, ks) = (input.shape(), kernel.shape());
    if is.len() != 4 || ks.len() != 4 || is[1] != ks[1] || stride == 0 {
        return Err(Error::dim("naive_conv", format!("input {is:?}, kernel {ks:?}, stride {stride}")));
    }
    let (n, c, h, w) = (is[0], is[1], is[2] as isize, is[3] as isize);
    let (o, kh, kw) = (ks[0], ks[2] as isize, ks[3] as isize);
    let p = pad as isize;
    if h + 2 * p < kh || w + 2 * p < kw {
        return Err(Error::dim("naive_conv", "kernel larger than padded input"));
    }
    if let Some(b) = bias {
        if b.shape() != [o] {
            return Err(Error::dim("naive_conv", format!("bias {:?} for {o} channels", b.shape())));
        }
    }
    let oh = ((h + 2 * p - kh) / stride as isize + 1) as usize;
    let ow = ((w + 2 * p - kw) / stride as isize + 1) as usize;
    let x = input.data();
    let k = kernel.data();
    let mut out = vec![0.0; n * o * oh * ow];
    for b in 0..n {
        for oc in 0..o {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = bias.map_or(0.0, |t| t.data()[oc]);
                    for ic in 0..c {
                        for dy in 0..kh {
                            for dx in 0..kw {
                                let y = (oy * stride) as isize + dy - p;
                                let xx = (ox * stride) as isize + dx - p;
                                if y < 0 || y >= h || xx < 0 || xx >= w {
                                    continue;
                                }
                                let xi = ((b * c + ic) as isize * h + y) * w + xx;
                                let ki = ((oc * c + ic) as isize * kh + dy) * kw + dx;
                                acc += x[xi as usize] * k[ki as usize];
                            }
                        }
                    }
                    out[((b * o + oc) * oh + oy) * ow + ox] = acc;
                }
            }
        }
    }
    Tensor::new(&[n, o, oh, ow], out)
}

/// Linear interpolation of one sequence to `len` points by the textbook
/// formula: point `t` sits at `u = t/(len-1)` on `[0, 1]`, i.e. at source
/// position `u * (s-1)`.
pub fn interpolate_pointwise(values: &[f64], len: usize) -> Vec<f64> {
    let s = values.len();
    if s == 1 || len == 1 {
        return vec![values[0]; len];
    }
    (0..len)
        .map(|t| {
            let pos = t as f64 / (len - 1) as f64 * (s - 1) as f64;
            let lo = (pos.floor() as usize).min(s - 2);
            let f = pos - lo as f64;
            values[lo] * (1.0 - f) + values[lo + 1] * f
        })
        .collect()
}

/// `L_val` after one exact inner SGD step from `theta` under raw weights `raw`.
pub fn lookahead_val_loss<P: BilevelProblem>(problem: &mut P, theta: &ParamVec, raw: &[f64], xi: f64) -> Result<f64> {
    let (_, g) = problem.train_grad_theta(theta, raw)?;
    let next = meta_search::inner_step(theta, &g, xi);
    problem.val_loss(&next)
}

/// Central difference of [`lookahead_val_loss`] in every raw weight.
pub fn brute_force_hypergradient<P: BilevelProblem>(
    problem: &mut P,
    theta: &ParamVec,
    raw: &[f64],
    xi: f64,
    h: f64,
) -> Result<Vec<f64>> {
    if !(h > 0.0 && h.is_finite()) {
        return Err(Error::Config(format!("oracle step h = {h} must be positive")));
    }
    let mut out = Vec::with_capacity(raw.len());
    let mut r = raw.to_vec();
    for p in 0..raw.len() {
        r[p] = raw[p] + h;
        let plus = lookahead_val_loss(problem, theta, &r, xi)?;
        r[p] = raw[p] - h;
        let minus = lookahead_val_loss(problem, theta, &r, xi)?;
        r[p] = raw[p];
        let d = (plus - minus) / (2.0 * h);
        if !d.is_finite() {
            return Err(Error::Numeric(format!("non-finite oracle component {p}")));
        }
        out.push(d);
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Component {
    pub approx: f64,
    pub oracle: f64,
    pub abs_error: f64,
    /// `|approx - oracle| / max(|oracle|, floor)`.
    pub rel_error: f64,
    /// Whether `|oracle| > floor`, i.e. the component counts towards the
    /// pass flag.
    pub checked: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct OracleReport {
    pub components: Vec<Component>,
    pub cosine: f64,
    pub tol: f64,
    pub floor: f64,
    pub min_cosine: f64,
}

impl OracleReport {
    pub const DEFAULT_TOL: f64 = 1e-3;
    pub const DEFAULT_FLOOR: f64 = 1e-8;
    pub const DEFAULT_MIN_COSINE: f64 = 0.999;

    pub fn compare(approx: &[f64], oracle: &[f64]) -> Result<Self> {
        Self::compare_with(approx, oracle, Self::DEFAULT_TOL, Self::DEFAULT_FLOOR, Self::DEFAULT_MIN_COSINE)
    }

    pub fn compare_with(approx: &[f64], oracle: &[f64], tol: f64, floor: f64, min_cosine: f64) -> Result<Self> {
        if approx.len() != oracle.len() {
            return Err(Error::dim("oracle", format!("{} vs {} components", approx.len(), oracle.len())));
        }
        let components = approx
            .iter()
            .zip(oracle)
            .map(|(&a, &o)| {
                let abs_error = (a - o).abs();
                Component {
                    approx: a,
                    oracle: o,
                    abs_error,
                    rel_error: abs_error / o.abs().max(floor),
                    checked: o.abs() > floor,
                }
            })
            .collect();
        Ok(OracleReport {
            components,
            cosine: cosine(approx, oracle),
            tol,
            floor,
            min_cosine,
        })
    }

    /// Largest relative error over checked components.
    pub fn max_rel_error(&self) -> f64 {
        self.components
            .iter()
            .filter(|c| c.checked)
            .map(|c| c.rel_error)
            .fold(0.0, f64::max)
    }

    pub fn passed(&self) -> bool {
        let rel_ok = self.components.iter().all(|c| !c.checked || c.rel_error < self.tol);
        let all_small = self.components.iter().all(|c| !c.checked);
        // cosine is meaningless for an all-zero reference
        rel_ok && (all_small || self.cosine > self.min_cosine)
    }
}

impl fmt::Display for OracleReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "{:>4}  {:>14}  {:>14}  {:>10}  {:>10}", "k", "approx", "oracle", "abs", "rel")?;
        for (k, c) in self.components.iter().enumerate() {
            writeln!(
                f,
                "{k:>4}  {:>14.6e}  {:>14.6e}  {:>10.2e}  {:>10.2e}{}",
                c.approx,
                c.oracle,
                c.abs_error,
                c.rel_error,
                if c.checked { "" } else { "  (below floor)" }
            )?;
        }
        writeln!(
            f,
            "cosine={:.9} max_rel_error={:.3e} tol={:e} floor={:e}",
            self.cosine,
            self.max_rel_error(),
            self.tol,
            self.floor
        )?;
        write!(f, "result={}", if self.passed() { "pass" } else { "FAIL" })
    }
}

/// Cosine similarity; 1 when both vectors are zero, 0 when only one is.
pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    match (na == 0.0, nb == 0.0) {
        (true, true) => 1.0,
        (true, false) | (false, true) => 0.0,
        _ => dot / (na * nb),
    }
}

/// One cell of [`sweep`].
#[derive(Clone, Debug, PartialEq)]
pub struct SweepPoint {
    pub h: f64,
    pub epsilon: EpsilonMode,
    pub max_rel_error: f64,
    pub cosine: f64,
}

/// Compares the finite-difference hypergradient against the oracle for
/// every combination of oracle step `h` and hypergradient step `epsilon`.
pub fn sweep<P: BilevelProblem>(
    problem: &mut P,
    theta: &ParamVec,
    raw: &[f64],
    xi: f64,
    hs: &[f64],
    epsilons: &[EpsilonMode],
) -> Result<Vec<SweepPoint>> {
    let approx: Vec<Vec<f64>> = epsilons
        .iter()
        .map(|&e| Ok(meta_search::hypergradient(problem, theta, raw, xi, e)?.grad))
        .collect::<Result<_>>()?;
    let mut out = Vec::new();
    for &h in hs {
        let oracle = brute_force_hypergradient(problem, theta, raw, xi, h)?;
        for (a, &e) in approx.iter().zip(epsilons) {
            let r = OracleReport::compare(a, &oracle)?;
            out.push(SweepPoint {
                h,
                epsilon: e,
                max_rel_error: r.max_rel_error(),
                cosine: r.cosine,
            });
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    /// `L_train = 1/2 (theta - a)^2`, `L_val = 1/2 theta^2`.
    struct Quadratic;

    impl BilevelProblem for Quadratic {
        fn train_grad_theta(&mut self, theta: &ParamVec, raw: &[f64]) -> Result<(f64, ParamVec)> {
            let d = theta.0[0].item() - raw[0];
            Ok((0.5 * d * d, ParamVec(vec![Tensor::scalar(d)])))
        }
        fn val_grad_theta(&mut self, theta: &ParamVec) -> Result<(f64, ParamVec)> {
            let t = theta.0[0].item();
            Ok((0.5 * t * t, ParamVec(vec![Tensor::scalar(t)])))
        }
        fn train_grad_alpha(&mut self, theta: &ParamVec, raw: &[f64]) -> Result<Vec<f64>> {
            Ok(vec![raw[0] - theta.0[0].item()])
        }
        fn val_loss(&mut self, theta: &ParamVec) -> Result<f64> {
            Ok(0.5 * theta.0[0].item().powi(2))
        }
    }

    #[test]
    fn quadratic_oracle() {
        let theta = ParamVec(vec![Tensor::scalar(1.0)]);
        let g = brute_force_hypergradient(&mut Quadratic, &theta, &[0.0], 0.1, 1e-4).unwrap();
        assert!((g[0] - 0.09).abs() < 1e-9, "{}", g[0]);
        let g = brute_force_hypergradient(&mut Quadratic, &theta, &[0.0], 0.0, 1e-4).unwrap();
        assert_eq!(g, vec![0.0]);
        assert!(brute_force_hypergradient(&mut Quadratic, &theta, &[0.0], 0.1, 0.0).is_err());
    }

    #[test]
    fn naive_conv_hand_cases() {
        let x = Tensor::new(&[1, 2, 3, 3], (0..18).map(f64::from).collect()).unwrap();
        let mut id = vec![0.0; 4];
        id[0] = 1.0;
        id[3] = 1.0;
        let k = Tensor::new(&[2, 2, 1, 1], id).unwrap();
        assert_eq!(naive_conv(&x, &k, None, 1, 0).unwrap(), x);

        let ones = Tensor::ones(&[1, 1, 3, 3]);
        let y = naive_conv(&ones, &Tensor::ones(&[1, 1, 3, 3]), None, 1, 1).unwrap();
        assert_eq!(y.data()[4], 9.0);
        assert_eq!(y.data()[0], 4.0);
        assert!(naive_conv(&ones, &Tensor::ones(&[1, 2, 3, 3]), None, 1, 1).is_err());
    }

    #[test]
    fn pointwise_interpolation() {
        let v = interpolate_pointwise(&[1.0, 3.0], 4);
        for (a, b) in v.iter().zip([1.0, 5.0 / 3.0, 7.0 / 3.0, 3.0]) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn report_flags() {
        let r = OracleReport::compare(&[1.0, 2.0, 1e-12], &[1.0005, 2.0, 0.0]).unwrap();
        assert!(r.passed(), "{r}");
        assert!(!r.components[2].checked);
        let r = OracleReport::compare(&[1.0, 2.0], &[1.01, 2.0]).unwrap();
        assert!(!r.passed());
        let r = OracleReport::compare(&[0.0, 0.0], &[0.0, 0.0]).unwrap();
        assert!(r.passed());
        assert!(OracleReport::compare(&[0.0], &[0.0, 1.0]).is_err());
    }
}
