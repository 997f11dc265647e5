//! Central-difference gradient verification for anything expressible on a
//! [`Graph`]. Always runs in `f64`.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Graph, Var};
use crate::error::Result;
use crate::tensor::Tensor;

pub mod suites;

#[derive(Clone, Copy, Debug)]
pub struct GradCheckConfig {
    pub step: f64,
    /// Lower bound on the relative-error denominator.
    pub floor: f64,
    /// Probe at most this many entries per input (evenly strided).
    pub max_entries: Option<usize>,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self { step: 1e-5, floor: 1e-8, max_entries: None }
    }
}

#[derive(Clone, Debug)]
pub struct InputReport {
    pub name: String,
    pub max_rel_error: f64,
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub checked: usize,
}

pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// `sum(w ⊙ v)` with fixed pseudo-random weights in `[0.5, 1.5]`, so that
/// losses like `sum(softmax(x))` do not have identically zero gradients.
pub fn probe_loss(g: &mut Graph<f64>, v: Var, seed: u64) -> Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let shape = g.value(v).shape().to_vec();
    let w = g.constant(Tensor::uniform(shape, 0.5, 1.5, &mut rng));
    let p = g.mul(v, w)?;
    g.sum(p)
}

fn probe_indices(n: usize, limit: Option<usize>) -> Vec<usize> {
    match limit {
        Some(k) if k < n => {
            let k = k.max(1);
            (0..k).map(|i| i * n / k).collect()
        }
        _ => (0..n).collect(),
    }
}

/// Compares the tape gradient of `f` against central differences for every
/// named input.
pub fn check<F>(inputs: &[(String, Tensor<f64>)], f: F, cfg: &GradCheckConfig) -> Result<Vec<InputReport>>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let eval = |values: &[Tensor<f64>]| -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = values.iter().map(|t| g.constant(t.clone())).collect();
        let loss = f(&mut g, &vars)?;
        Ok(g.value(loss).item())
    };

    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|(_, t)| g.param(t.clone())).collect();
    let loss = f(&mut g, &vars)?;
    let grads = g.backward(loss)?;

    let mut values: Vec<Tensor<f64>> = inputs.iter().map(|(_, t)| t.clone()).collect();
    let mut reports = Vec::with_capacity(inputs.len());
    for (k, (name, original)) in inputs.iter().enumerate() {
        let analytic = grads.wrt(&g, vars[k])?;
        let mut report = InputReport {
            name: name.clone(),
            max_rel_error: 0.0,
            worst_index: 0,
            analytic: 0.0,
            numeric: 0.0,
            checked: 0,
        };
        for idx in probe_indices(original.numel(), cfg.max_entries) {
            let x0 = original.data()[idx];
            values[k].data_mut()[idx] = x0 + cfg.step;
            let up = eval(&values)?;
            values[k].data_mut()[idx] = x0 - cfg.step;
            let down = eval(&values)?;
            values[k].data_mut()[idx] = x0;
            let numeric = (up - down) / (2.0 * cfg.step);
            let a = analytic.data()[idx];
            let err = relative_error(a, numeric, cfg.floor);
            report.checked += 1;
            if err >= report.max_rel_error {
                report.max_rel_error = err;
                report.worst_index = idx;
                report.analytic = a;
                report.numeric = numeric;
            }
        }
        reports.push(report);
    }
    Ok(reports)
}

pub fn worst(reports: &[InputReport]) -> f64 {
    reports.iter().map(|r| r.max_rel_error).fold(0.0, f64::max)
}
