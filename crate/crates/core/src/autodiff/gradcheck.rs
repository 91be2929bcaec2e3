use crate::error::{Error, Result};
use crate::tensor::Tensor;

use super::graph::{Graph, Var};

/// Gradient magnitude below which the relative error is measured against
/// this floor instead, so that entries with vanishing gradients are judged
/// on absolute error.
pub const GRAD_FLOOR: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq)]
pub struct EntryError {
    pub param: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub checked: usize,
    pub max_rel_error: f64,
    pub worst: Option<EntryError>,
    /// Every entry whose relative error exceeded the tolerance.
    pub failures: Vec<EntryError>,
    pub epsilon: f64,
    pub rel_tol: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.failures.is_empty()
    }

    /// Names of parameters with at least one failing entry, in order of
    /// first failure.
    pub fn failing_params(&self) -> Vec<&str> {
        let mut names: Vec<&str> = Vec::new();
        for f in &self.failures {
            if !names.contains(&f.param.as_str()) {
                names.push(&f.param);
            }
        }
        names
    }
}

fn evaluate<F>(
    loss_fn: &mut F,
    params: &[(String, Tensor<f64>)],
) -> Result<(Graph<f64>, Vec<Var>, Var)>
where
    F: FnMut(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = params.iter().map(|(_, t)| g.param(t.clone())).collect();
    let loss = loss_fn(&mut g, &vars)?;
    if !g.value(loss).is_scalar() {
        return Err(Error::invalid("loss function must return a scalar"));
    }
    Ok((g, vars, loss))
}

/// Compares the analytic gradient of `loss_fn` with central differences
/// `(f(θ+ε) − f(θ−ε)) / 2ε` for every entry of every parameter.
///
/// `loss_fn` is called once for the analytic pass and twice per entry
/// afterwards, always on a fresh graph with the parameters bound in order.
/// It must be deterministic; parameters are restored before returning.
pub fn finite_diff_check<F>(
    mut loss_fn: F,
    params: &mut [(String, Tensor<f64>)],
    epsilon: f64,
    rel_tol: f64,
) -> Result<GradCheckReport>
where
    F: FnMut(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    if !(epsilon > 0.0) {
        return Err(Error::invalid(format!(
            "epsilon must be positive, got {epsilon}"
        )));
    }
    let (mut g, vars, loss) = evaluate(&mut loss_fn, params)?;
    let base = g.scalar(loss);
    if !base.is_finite() {
        return Err(Error::numeric(format!(
            "loss is {base} at the unperturbed parameters"
        )));
    }
    g.backward(loss)?;
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .zip(params.iter())
        .map(|(&v, (_, t))| {
            g.grad(v)
                .map(|s| s.to_vec())
                .unwrap_or_else(|| vec![0.0; t.numel()])
        })
        .collect();
    drop(g);

    let mut report = GradCheckReport {
        checked: 0,
        max_rel_error: 0.0,
        worst: None,
        failures: Vec::new(),
        epsilon,
        rel_tol,
    };
    for p in 0..params.len() {
        for idx in 0..params[p].1.numel() {
            let orig = params[p].1.data()[idx];
            let mut eval_at = |x: f64, params: &mut [(String, Tensor<f64>)]| -> Result<f64> {
                params[p].1.data_mut()[idx] = x;
                let (g, _, loss) = evaluate(&mut loss_fn, params)?;
                let f = g.scalar(loss);
                if !f.is_finite() {
                    return Err(Error::numeric(format!(
                        "loss is {f} after perturbing {}[{idx}]",
                        params[p].0
                    )));
                }
                Ok(f)
            };
            let plus = eval_at(orig + epsilon, params);
            let minus = eval_at(orig - epsilon, params);
            params[p].1.data_mut()[idx] = orig;
            let numeric = (plus? - minus?) / (2.0 * epsilon);
            let a = analytic[p][idx];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(GRAD_FLOOR);
            let entry = EntryError {
                param: params[p].0.clone(),
                index: idx,
                analytic: a,
                numeric,
                rel_error: rel,
            };
            report.checked += 1;
            if rel > report.max_rel_error || report.worst.is_none() {
                report.max_rel_error = rel;
                report.worst = Some(entry.clone());
            }
            if !(rel <= rel_tol) {
                report.failures.push(entry);
            }
        }
    }
    Ok(report)
}
