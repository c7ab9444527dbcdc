use super::graph::{Graph, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Worst coordinate found by [`grad_check_report`].
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct GradCheckReport {
    pub error: f64,
    pub param: usize,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

/// Compares reverse-mode gradients against central differences.
///
/// `f` builds a scalar loss from the parameter leaves it is handed. Returns the
/// maximum over every parameter coordinate of
/// `|analytic - numeric| / max(1e-8, |numeric|)`.
pub fn grad_check<F>(f: F, params: &[Tensor<f64>], eps: f64) -> Result<f64>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    Ok(grad_check_report(f, params, eps)?.error)
}

/// Like [`grad_check`] but also says where the worst coordinate is.
pub fn grad_check_report<F>(f: F, params: &[Tensor<f64>], eps: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    if !(eps > 0.0) {
        return Err(Error::contract("grad_check eps must be positive"));
    }
    if params.iter().any(|p| !p.all_finite()) {
        return Err(Error::Numeric("grad_check parameters are not finite".into()));
    }

    let eval = |values: &[Tensor<f64>]| -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = values.iter().map(|p| g.parameter(p.clone())).collect();
        let loss = f(&mut g, &vars)?;
        let v = g.value(loss).data()[0];
        if !v.is_finite() {
            return Err(Error::Numeric(format!("loss evaluated to {v}")));
        }
        Ok(v)
    };

    let mut g = Graph::new();
    let vars: Vec<Var> = params.iter().map(|p| g.parameter(p.clone())).collect();
    let loss = f(&mut g, &vars)?;
    let grads = g.backward(loss)?;
    let analytic: Vec<Tensor<f64>> = vars.iter().map(|&v| grads.get_or_zeros(v)).collect();
    if analytic.iter().any(|t| !t.all_finite()) {
        return Err(Error::Numeric("analytic gradient is not finite".into()));
    }

    let mut work = params.to_vec();
    let mut worst = GradCheckReport::default();
    for (pi, grad) in analytic.iter().enumerate() {
        for i in 0..params[pi].numel() {
            let orig = params[pi].data()[i];
            work[pi].data_mut()[i] = orig + eps;
            let up = eval(&work)?;
            work[pi].data_mut()[i] = orig - eps;
            let down = eval(&work)?;
            work[pi].data_mut()[i] = orig;
            let numeric = (up - down) / (2.0 * eps);
            let err = (grad.data()[i] - numeric).abs() / numeric.abs().max(1e-8);
            if err > worst.error {
                worst = GradCheckReport {
                    error: err,
                    param: pi,
                    index: i,
                    analytic: grad.data()[i],
                    numeric,
                };
            }
        }
    }
    Ok(worst)
}
