use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct ParamError {
    pub name: String,
    pub rel_error: f64,
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub params: Vec<ParamError>,
    pub max_rel_error: f64,
    pub tol: f64,
    pub passed: bool,
}

/// Norms below this are treated as zero when forming a relative error, so a
/// gradient that vanishes identically compares roundoff against roundoff.
pub const GRAD_FLOOR: f64 = 1e-6;

/// `‖a − n‖ / max(‖a‖, ‖n‖, GRAD_FLOOR)`.
pub fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let diff = analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n) * (a - n))
        .sum::<f64>()
        .sqrt();
    let na = analytic.iter().map(|a| a * a).sum::<f64>().sqrt();
    let nn = numeric.iter().map(|a| a * a).sum::<f64>().sqrt();
    diff / na.max(nn).max(GRAD_FLOOR)
}

/// Compare reverse-mode gradients of `f` against central differences with
/// step `eps`, one relative error per named parameter.
pub fn grad_check<F>(f: F, params: &[(String, Tensor<f64>)], eps: f64, tol: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let eval = |values: &[Tensor<f64>]| -> Result<f64> {
        let mut g = Graph::checked();
        let vars: Vec<Var> = values.iter().map(|t| g.param(t.clone())).collect();
        let loss = f(&mut g, &vars)?;
        Ok(g.value(loss).data()[0])
    };

    let mut g = Graph::checked();
    let vars: Vec<Var> = params.iter().map(|(_, t)| g.param(t.clone())).collect();
    let loss = f(&mut g, &vars)?;
    let grads = g.backward(loss)?;

    let mut values: Vec<Tensor<f64>> = params.iter().map(|(_, t)| t.clone()).collect();
    let mut report = Vec::with_capacity(params.len());
    for (pi, (name, t)) in params.iter().enumerate() {
        let analytic: Vec<f64> = match grads.get(vars[pi]) {
            Some(gt) => gt.data().to_vec(),
            None => vec![0.0; t.len()],
        };
        let mut numeric = vec![0.0; t.len()];
        for i in 0..t.len() {
            let orig = values[pi].data()[i];
            values[pi].data_mut()[i] = orig + eps;
            let up = eval(&values)?;
            values[pi].data_mut()[i] = orig - eps;
            let down = eval(&values)?;
            values[pi].data_mut()[i] = orig;
            numeric[i] = (up - down) / (2.0 * eps);
        }
        let rel = relative_error(&analytic, &numeric);
        if !rel.is_finite() {
            return Err(Error::NonFinite { op: "grad_check" });
        }
        report.push(ParamError { name: name.clone(), rel_error: rel });
    }
    let max_rel_error = report.iter().map(|p| p.rel_error).fold(0.0, f64::max);
    Ok(GradCheckReport { params: report, max_rel_error, tol, passed: max_rel_error <= tol })
}
