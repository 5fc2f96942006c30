use super::{Graph, Tensor, Var};
use crate::error::{Error, Result};

/// Compares reverse-mode gradients against central finite differences.
///
/// `f` builds a scalar from the given input vars on a fresh graph. Returns
/// the maximum over all input components of
/// `|analytic - numeric| / max(1, |analytic|)`.
pub fn grad_check<F>(f: F, inputs: &[Tensor], eps: f64) -> Result<f64>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    if !(eps > 0.0 && eps <= 1e-2) {
        return Err(Error::contract("grad_check", format!("eps {eps} outside (0, 1e-2]")));
    }

    let eval = |values: &[Tensor]| -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = values.iter().map(|t| g.constant(t.clone())).collect();
        let out = f(&mut g, &vars)?;
        let v = g.value(out);
        if v.numel() != 1 {
            return Err(Error::contract("grad_check", "function output is not scalar"));
        }
        Ok(v.item())
    };

    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let out = f(&mut g, &vars)?;
    if !g.value(out).item().is_finite() {
        return Err(Error::Numeric("grad_check: function output is not finite".into()));
    }
    g.backward(out, &[])?;

    let mut worst: f64 = 0.0;
    let mut probe: Vec<Tensor> = inputs.to_vec();
    for (idx, var) in vars.iter().enumerate() {
        let analytic = g.grad(*var).expect("leaf gradient").data().to_vec();
        for (k, &a) in analytic.iter().enumerate() {
            let orig = probe[idx].data()[k];
            probe[idx].data_mut()[k] = orig + eps;
            let up = eval(&probe)?;
            probe[idx].data_mut()[k] = orig - eps;
            let down = eval(&probe)?;
            probe[idx].data_mut()[k] = orig;
            if !up.is_finite() || !down.is_finite() {
                return Err(Error::Numeric(format!(
                    "grad_check: non-finite output perturbing input {idx} component {k}"
                )));
            }
            let numeric = (up - down) / (2.0 * eps);
            worst = worst.max((a - numeric).abs() / a.abs().max(1.0));
        }
    }
    Ok(worst)
}
