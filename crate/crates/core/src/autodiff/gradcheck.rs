//! Central-difference gradient checking against [`Graph::backward`].

use super::{Graph, Tensor, Var};
use crate::error::Result;

/// Settings for [`grad_check`].
#[derive(Clone, Copy, Debug)]
pub struct GradCheck {
    /// Central-difference step.
    pub h: f64,
    /// Maximum allowed relative error.
    pub tol: f64,
    /// Denominator floor for the relative error, so components that are
    /// numerically zero are judged on absolute error instead.
    pub floor: f64,
}

impl Default for GradCheck {
    fn default() -> Self {
        GradCheck {
            h: 1e-5,
            tol: 1e-5,
            floor: 1e-4,
        }
    }
}

#[derive(Clone, Debug)]
pub struct ParamReport {
    pub index: usize,
    pub max_rel_error: f64,
    pub max_abs_error: f64,
    /// Flat element index of the worst relative error.
    pub worst_element: usize,
    pub analytic: f64,
    pub numeric: f64,
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub params: Vec<ParamReport>,
    pub tol: f64,
}

impl GradCheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.params.iter().map(|p| p.max_rel_error).fold(0.0, f64::max)
    }

    pub fn passed(&self) -> bool {
        self.max_rel_error() < self.tol
    }
}

impl std::fmt::Display for GradCheckReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        for p in &self.params {
            writeln!(
                f,
                "param={} max_rel_error={:.3e} max_abs_error={:.3e} worst={} analytic={:.9e} numeric={:.9e}",
                p.index, p.max_rel_error, p.max_abs_error, p.worst_element, p.analytic, p.numeric
            )?;
        }
        write!(f, "tol={:e} pass={}", self.tol, self.passed())
    }
}

/// Compares backward-mode gradients of the scalar program `f` with central
/// differences on every element of every tensor in `params`.
///
/// `f` receives a fresh graph and one leaf per param tensor, in order.
pub fn grad_check<F>(mut f: F, params: &[Tensor], cfg: GradCheck) -> Result<GradCheckReport>
where
    F: FnMut(&mut Graph, &[Var]) -> Result<Var>,
{
    let mut eval = |values: &[Tensor], with_grad: bool| -> Result<(f64, Vec<Tensor>)> {
        let mut g = Graph::new();
        let vars = values
            .iter()
            .map(|t| g.leaf(t.clone(), with_grad))
            .collect::<Result<Vec<_>>>()?;
        let loss = f(&mut g, &vars)?;
        let value = g.value(loss).item();
        if !with_grad {
            return Ok((value, Vec::new()));
        }
        let mut grads = g.backward(loss)?;
        let out = vars
            .iter()
            .zip(values)
            .map(|(&v, t)| grads.take_or_zeros(v, t.shape()))
            .collect();
        Ok((value, out))
    };

    let (_, analytic) = eval(params, true)?;
    let mut work = params.to_vec();
    let mut reports = Vec::with_capacity(params.len());
    for (pi, grad) in analytic.iter().enumerate() {
        let mut report = ParamReport {
            index: pi,
            max_rel_error: 0.0,
            max_abs_error: 0.0,
            worst_element: 0,
            analytic: 0.0,
            numeric: 0.0,
        };
        for e in 0..params[pi].numel() {
            let orig = params[pi].data()[e];
            work[pi].data_mut()[e] = orig + cfg.h;
            let (plus, _) = eval(&work, false)?;
            work[pi].data_mut()[e] = orig - cfg.h;
            let (minus, _) = eval(&work, false)?;
            work[pi].data_mut()[e] = orig;

            let numeric = (plus - minus) / (2.0 * cfg.h);
            let a = grad.data()[e];
            let abs = (a - numeric).abs();
            let rel = abs / a.abs().max(numeric.abs()).max(cfg.floor);
            report.max_abs_error = report.max_abs_error.max(abs);
            if rel > report.max_rel_error || e == 0 {
                report.max_rel_error = report.max_rel_error.max(rel);
                report.worst_element = e;
                report.analytic = a;
                report.numeric = numeric;
            }
        }
        reports.push(report);
    }
    Ok(GradCheckReport {
        params: reports,
        tol: cfg.tol,
    })
}
