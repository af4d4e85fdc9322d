//! Central finite-difference checks of recorded gradients.
//!
//! The numeric side only ever evaluates forward values, so it is
//! independent of the backward rules it is compared against. Checks run
//! at `f64`.

use crate::error::Result;
use crate::graph::{Graph, Var};
use crate::params::{ParamId, ParamStore};
use crate::tensor::Tensor;

/// `|a - b| / max(|a|, |b|, 1e-8)`.
pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-8)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Mismatch {
    pub name: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

#[derive(Clone, Debug, Default)]
pub struct GradCheckReport {
    pub checked: usize,
    pub max_rel_error: f64,
    pub worst: Option<Mismatch>,
}

impl GradCheckReport {
    fn record(&mut self, name: &str, index: usize, analytic: f64, numeric: f64) {
        self.checked += 1;
        let err = relative_error(analytic, numeric);
        if err > self.max_rel_error || self.worst.is_none() {
            self.max_rel_error = self.max_rel_error.max(err);
            self.worst = Some(Mismatch {
                name: name.to_string(),
                index,
                analytic,
                numeric,
            });
        }
    }

    pub fn merge(&mut self, other: GradCheckReport) {
        self.checked += other.checked;
        if other.max_rel_error > self.max_rel_error || self.worst.is_none() {
            self.max_rel_error = other.max_rel_error;
            self.worst = other.worst;
        }
    }

    pub fn passes(&self, tolerance: f64) -> bool {
        self.max_rel_error < tolerance
    }
}

fn eval_scalar<F>(store: &ParamStore<f64>, f: &F) -> Result<f64>
where
    F: Fn(&mut Graph<f64>) -> Result<Var>,
{
    let mut g = Graph::with_params(store);
    let out = f(&mut g)?;
    Ok(g.value(out).item())
}

/// Compares the gradient of `f` with respect to the listed parameters
/// (all parameters when `only` is `None`) against central differences.
pub fn check_params<F>(
    store: &ParamStore<f64>,
    only: Option<&[ParamId]>,
    eps: f64,
    f: F,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<f64>) -> Result<Var>,
{
    let analytic = {
        let mut g = Graph::with_params(store);
        let out = f(&mut g)?;
        g.backward(out)?
    };
    let ids: Vec<ParamId> = match only {
        Some(ids) => ids.to_vec(),
        None => store.ids().collect(),
    };
    let mut report = GradCheckReport::default();
    let mut probe = store.clone();
    for id in ids {
        let numel = store.get(id).numel();
        let grad = analytic.param_dense(id, numel);
        for i in 0..numel {
            let orig = store.get(id).data()[i];
            probe.get_mut(id).data_mut()[i] = orig + eps;
            let plus = eval_scalar(&probe, &f)?;
            probe.get_mut(id).data_mut()[i] = orig - eps;
            let minus = eval_scalar(&probe, &f)?;
            probe.get_mut(id).data_mut()[i] = orig;
            let numeric = (plus - minus) / (2.0 * eps);
            report.record(store.name(id), i, grad[i], numeric);
        }
    }
    Ok(report)
}

/// Compares gradients with respect to free input tensors. `f` receives
/// the leaf nodes created for `inputs`, in order.
pub fn check_leaves<F>(inputs: &[Tensor<f64>], eps: f64, f: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let run = |vals: &[Tensor<f64>]| -> Result<(f64, Vec<Tensor<f64>>)> {
        let mut g = Graph::new();
        let leaves: Vec<Var> = vals.iter().map(|t| g.leaf(t.clone())).collect();
        let out = f(&mut g, &leaves)?;
        let value = g.value(out).item();
        let grads = g.backward(out)?;
        Ok((
            value,
            leaves
                .iter()
                .map(|&l| grads.wrt(l).cloned().expect("leaf gradient"))
                .collect(),
        ))
    };
    let forward = |vals: &[Tensor<f64>]| -> Result<f64> {
        let mut g = Graph::new();
        let leaves: Vec<Var> = vals.iter().map(|t| g.constant(t.clone())).collect();
        let out = f(&mut g, &leaves)?;
        Ok(g.value(out).item())
    };
    let (_, analytic) = run(inputs)?;
    let mut report = GradCheckReport::default();
    let mut probe = inputs.to_vec();
    for (which, grad) in analytic.iter().enumerate() {
        for i in 0..inputs[which].numel() {
            let orig = inputs[which].data()[i];
            probe[which].data_mut()[i] = orig + eps;
            let plus = forward(&probe)?;
            probe[which].data_mut()[i] = orig - eps;
            let minus = forward(&probe)?;
            probe[which].data_mut()[i] = orig;
            let numeric = (plus - minus) / (2.0 * eps);
            report.record(&format!("input{which}"), i, grad.data()[i], numeric);
        }
    }
    Ok(report)
}
