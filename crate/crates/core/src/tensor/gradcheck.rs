use std::fmt;

use crate::error::{Error, Result};

use super::{Graph, Tensor, Var};

/// Denominator floor for the relative error, so gradients that are
/// numerically zero are compared in absolute terms.
const REL_FLOOR: f64 = 1e-5;

#[derive(Clone, Debug)]
pub struct GradCheckEntry {
    pub name: String,
    pub max_rel_err: f64,
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub tol: f64,
    pub entries: Vec<GradCheckEntry>,
}

impl GradCheckReport {
    pub fn max_rel_err(&self) -> f64 {
        self.entries.iter().map(|e| e.max_rel_err).fold(0.0, f64::max)
    }

    pub fn passed(&self) -> bool {
        self.failures().is_empty()
    }

    /// Names of parameter groups whose error exceeds the tolerance.
    pub fn failures(&self) -> Vec<&str> {
        self.entries
            .iter()
            .filter(|e| !(e.max_rel_err < self.tol))
            .map(|e| e.name.as_str())
            .collect()
    }
}

impl fmt::Display for GradCheckReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for e in &self.entries {
            let status = if e.max_rel_err < self.tol { "ok" } else { "FAIL" };
            writeln!(
                f,
                "{status:>4}  {:<28} max_rel_err={:.3e} (index {}, analytic {:.6e}, numeric {:.6e})",
                e.name, e.max_rel_err, e.worst_index, e.analytic, e.numeric
            )?;
        }
        Ok(())
    }
}

/// Compares reverse-mode gradients of `f` against central differences
/// `(f(x + h) − f(x − h)) / 2h`, element by element, for every named
/// parameter. `f` receives one leaf per parameter, in order, and must return
/// a scalar.
pub fn finite_difference_check<F>(f: F, params: &[(String, Tensor)], h: f64, tol: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    if h <= 0.0 {
        return Err(Error::invalid("finite-difference step must be positive"));
    }
    let eval = |tensors: &[Tensor]| -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = tensors.iter().map(|t| g.leaf(t)).collect();
        let out = f(&mut g, &vars)?;
        Ok(g.scalar(out))
    };

    let mut tensors: Vec<Tensor> = params.iter().map(|(_, t)| t.clone().with_grad()).collect();
    let mut g = Graph::new();
    let vars: Vec<Var> = tensors.iter().map(|t| g.leaf(t)).collect();
    let loss = f(&mut g, &vars)?;
    g.backward(loss)?;
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .zip(&tensors)
        .map(|(v, t)| g.grad(*v).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; t.numel()]))
        .collect();

    let mut entries = Vec::with_capacity(params.len());
    for (p, (name, _)) in params.iter().enumerate() {
        let mut worst = GradCheckEntry {
            name: name.clone(),
            max_rel_err: 0.0,
            worst_index: 0,
            analytic: 0.0,
            numeric: 0.0,
        };
        for i in 0..tensors[p].numel() {
            let orig = tensors[p].values()[i];
            tensors[p].values_mut()[i] = orig + h;
            let plus = eval(&tensors)?;
            tensors[p].values_mut()[i] = orig - h;
            let minus = eval(&tensors)?;
            tensors[p].values_mut()[i] = orig;

            let numeric = (plus - minus) / (2.0 * h);
            let a = analytic[p][i];
            let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(REL_FLOOR);
            if err > worst.max_rel_err || err.is_nan() {
                worst.max_rel_err = if err.is_nan() { f64::INFINITY } else { err };
                worst.worst_index = i;
                worst.analytic = a;
                worst.numeric = numeric;
            }
        }
        entries.push(worst);
    }
    Ok(GradCheckReport { tol, entries })
}
