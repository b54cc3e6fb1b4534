//! Central finite-difference verification of analytic gradients.

use super::{Graph, ParamId, ParamStore, Tensor, Var};
use crate::error::{Error, Result};

/// Finite-difference step on f64.
pub const FD_STEP: f64 = 1e-5;

/// Gradients whose magnitude is below this floor are compared absolutely
/// against it rather than relative to their own size.
pub const REL_FLOOR: f64 = 1e-3;

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    /// Parameter name (or input index) and flat element of the worst entry.
    pub worst: Option<(String, usize)>,
    pub checked: usize,
}

impl GradCheckReport {
    fn new() -> Self {
        Self {
            max_rel_err: 0.0,
            worst: None,
            checked: 0,
        }
    }

    fn record(&mut self, label: &str, idx: usize, a: f64, n: f64) {
        let e = relative_error(a, n);
        self.checked += 1;
        if self.worst.is_none() || e > self.max_rel_err {
            self.max_rel_err = e;
            self.worst = Some((label.to_string(), idx));
        }
    }
}

/// Evenly spaced subset of `0..n` with at most `cap` entries.
fn sample_indices(n: usize, cap: usize) -> Vec<usize> {
    if n <= cap {
        return (0..n).collect();
    }
    (0..cap).map(|i| i * n / cap).collect()
}

fn eval_scalar<F>(store: &ParamStore, f: &F) -> Result<f64>
where
    F: Fn(&Graph) -> Result<Var>,
{
    let g = Graph::with_params(store);
    let out = f(&g)?;
    let v = g.scalar(out);
    if !v.is_finite() {
        return Err(Error::NonFinite("grad_check loss".into()));
    }
    Ok(v)
}

/// Compare analytic parameter gradients of the scalar `f` against central
/// differences. At most `cap_per_param` elements of each parameter are probed.
pub fn grad_check<F>(store: &ParamStore, f: F, cap_per_param: usize) -> Result<GradCheckReport>
where
    F: Fn(&Graph) -> Result<Var>,
{
    let analytic: Vec<(ParamId, Vec<f64>)> = {
        let g = Graph::with_params(store);
        let out = f(&g)?;
        let grads = g.backward(out)?;
        grads.params().into_iter().map(|(p, v)| (p, v.to_vec())).collect()
    };
    let mut report = GradCheckReport::new();
    let mut probe = store.clone();
    for (id, grad) in analytic {
        let name = store.get(id).name.clone();
        for idx in sample_indices(grad.len(), cap_per_param) {
            let orig = probe.tensor(id).data[idx];
            probe.get_mut(id).tensor.data[idx] = orig + FD_STEP;
            let fp = eval_scalar(&probe, &f)?;
            probe.get_mut(id).tensor.data[idx] = orig - FD_STEP;
            let fm = eval_scalar(&probe, &f)?;
            probe.get_mut(id).tensor.data[idx] = orig;
            report.record(&name, idx, grad[idx], (fp - fm) / (2.0 * FD_STEP));
        }
    }
    Ok(report)
}

/// Same check with respect to plain input tensors.
pub fn grad_check_inputs<F>(inputs: &[Tensor], f: F) -> Result<GradCheckReport>
where
    F: Fn(&Graph, &[Var]) -> Result<Var>,
{
    let run = |ins: &[Tensor]| -> Result<f64> {
        let g = Graph::new();
        let vars: Vec<Var> = ins.iter().map(|t| g.input(t.clone())).collect();
        let out = f(&g, &vars)?;
        Ok(g.scalar(out))
    };
    let g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.input(t.clone())).collect();
    let out = f(&g, &vars)?;
    let grads = g.backward(out)?;
    let mut report = GradCheckReport::new();
    let mut probe = inputs.to_vec();
    for (k, v) in vars.iter().enumerate() {
        let analytic = grads.wrt(*v).map(|s| s.to_vec()).unwrap_or_else(|| vec![0.0; inputs[k].numel()]);
        for idx in 0..inputs[k].numel() {
            let orig = probe[k].data[idx];
            probe[k].data[idx] = orig + FD_STEP;
            let fp = run(&probe)?;
            probe[k].data[idx] = orig - FD_STEP;
            let fm = run(&probe)?;
            probe[k].data[idx] = orig;
            report.record(&format!("input{k}"), idx, analytic[idx], (fp - fm) / (2.0 * FD_STEP));
        }
    }
    Ok(report)
}
