use super::{Graph, Tensor, Var};
use crate::error::{FluxError, Result};

/// Outcome of a finite-difference gradient check.
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    /// max over all entries of |analytic − numeric| / max(1, |numeric|)
    pub max_rel_error: f64,
    /// Same statistic per input tensor, in input order.
    pub per_tensor: Vec<f64>,
    /// (tensor, element) of the worst entry.
    pub worst: (usize, usize),
    pub entries_checked: usize,
}

/// Compares reverse-mode gradients of `loss_fn` against central differences
/// over every entry of every tensor in `params`.
///
/// `loss_fn` receives a fresh graph and one leaf per parameter tensor and must
/// return a scalar node. It is called once for the analytic pass and twice per
/// entry for the numeric pass.
pub fn grad_check<F>(loss_fn: F, params: &[Tensor], eps: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    if !(eps > 0.0) {
        return Err(FluxError::InvalidInput(format!("eps must be positive, got {eps}")));
    }
    let mut g = Graph::new();
    let vars: Vec<Var> = params.iter().map(|t| g.param(t.clone())).collect();
    let loss = loss_fn(&mut g, &vars)?;
    if !g.value(loss).is_finite() {
        return Err(FluxError::NonFinite("grad_check loss"));
    }
    let grads = g.backward(loss)?;
    let analytic: Vec<Tensor> = vars
        .iter()
        .zip(params)
        .map(|(&v, p)| grads.get(v).cloned().unwrap_or_else(|| Tensor::zeros(p.shape())))
        .collect();
    drop(g);

    let eval = |ps: &[Tensor]| -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = ps.iter().map(|t| g.constant(t.clone())).collect();
        let l = loss_fn(&mut g, &vars)?;
        let v = g.value(l).item();
        if !v.is_finite() {
            return Err(FluxError::NonFinite("grad_check loss"));
        }
        Ok(v)
    };

    let mut work: Vec<Tensor> = params.to_vec();
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        per_tensor: vec![0.0; params.len()],
        worst: (0, 0),
        entries_checked: 0,
    };
    for ti in 0..params.len() {
        for ei in 0..params[ti].len() {
            let orig = params[ti].data()[ei];
            work[ti].data_mut()[ei] = orig + eps;
            let plus = eval(&work)?;
            work[ti].data_mut()[ei] = orig - eps;
            let minus = eval(&work)?;
            work[ti].data_mut()[ei] = orig;
            let numeric = (plus - minus) / (2.0 * eps);
            let err = (analytic[ti].data()[ei] - numeric).abs() / numeric.abs().max(1.0);
            report.entries_checked += 1;
            if err > report.per_tensor[ti] {
                report.per_tensor[ti] = err;
            }
            if err > report.max_rel_error {
                report.max_rel_error = err;
                report.worst = (ti, ei);
            }
        }
    }
    Ok(report)
}
