//! Central finite-difference checks for reverse-mode gradients (64-bit only).

use crate::error::Result;
use crate::graph::{Graph, Var};
use crate::tensor::Tensor;

pub const DEFAULT_STEP: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq)]
pub struct GradReport {
    /// Per input: ‖analytic − numeric‖₂ / max(‖analytic‖₂, ‖numeric‖₂) over the checked entries.
    pub relative_errors: Vec<f64>,
    pub checked: usize,
}

impl GradReport {
    pub fn max_relative_error(&self) -> f64 {
        self.relative_errors.iter().copied().fold(0.0, f64::max)
    }
}

/// Relative error between two gradient vectors. Two (near-)zero vectors agree.
pub fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let diff: f64 = analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n) * (a - n))
        .sum::<f64>()
        .sqrt();
    let na = analytic.iter().map(|a| a * a).sum::<f64>().sqrt();
    let nn = numeric.iter().map(|a| a * a).sum::<f64>().sqrt();
    let scale = na.max(nn);
    if scale < 1e-12 {
        diff
    } else {
        diff / scale
    }
}

/// Compares the gradient of the scalar `f(inputs)` with central differences.
///
/// `f` builds the computation on a fresh graph from leaves it receives; it
/// is called once for the analytic pass and twice per checked entry. At most
/// `max_entries` evenly spaced entries of each input are checked.
pub fn check<F>(inputs: &[Tensor<f64>], f: F, step: f64, max_entries: usize) -> Result<GradReport>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let eval = |vals: &[Tensor<f64>]| -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = vals.iter().map(|t| g.leaf(t.clone(), false)).collect();
        let out = f(&mut g, &vars)?;
        Ok(g.value(out).data()[0])
    };

    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone(), true)).collect();
    let out = f(&mut g, &vars)?;
    g.backward(out)?;

    let mut report = GradReport {
        relative_errors: Vec::new(),
        checked: 0,
    };
    let mut work = inputs.to_vec();
    for (i, input) in inputs.iter().enumerate() {
        let analytic_full = g
            .grad(vars[i])
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(input.shape()));
        let n = input.numel();
        let stride = (n / max_entries.max(1)).max(1);
        let mut analytic = Vec::new();
        let mut numeric = Vec::new();
        for e in (0..n).step_by(stride).take(max_entries) {
            let orig = work[i].data()[e];
            work[i].data_mut()[e] = orig + step;
            let plus = eval(&work)?;
            work[i].data_mut()[e] = orig - step;
            let minus = eval(&work)?;
            work[i].data_mut()[e] = orig;
            numeric.push((plus - minus) / (2.0 * step));
            analytic.push(analytic_full.data()[e]);
        }
        report.checked += analytic.len();
        report.relative_errors.push(relative_error(&analytic, &numeric));
    }
    Ok(report)
}


#[cfg(test)]
impl Tensor<f64> {
    fn into_mul(self, other: &Tensor<f64>) -> Tensor<f64> {
        let d = self.data().iter().zip(other.data()).map(|(a, b)| a * b).collect();
        Tensor::from_vec(self.shape(), d).unwrap()
    }
}
