use super::{AutodiffError, Graph, ParamSet, Var};

/// Worst elementwise relative error observed for one parameter tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct TensorGradError {
    pub name: String,
    pub max_relative_error: f64,
}

/// Floor on the denominator of the relative error. Entries whose true
/// gradient is near zero are compared in absolute terms against this scale,
/// which sits well above central-difference round-off at `h = 1e-5`.
pub const RELATIVE_ERROR_FLOOR: f64 = 1e-6;

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(RELATIVE_ERROR_FLOOR)
}

fn evaluate<F>(params: &ParamSet, f: &mut F) -> Result<f64, AutodiffError>
where
    F: FnMut(&mut Graph, &[Var]) -> Result<Var, AutodiffError>,
{
    let mut g = Graph::new();
    let vars = params.bind(&mut g);
    let root = f(&mut g, &vars)?;
    let value = g.value(root);
    if !value.is_scalar() {
        return Err(AutodiffError::NonScalarRoot(value.shape().to_vec()));
    }
    Ok(value.item())
}

/// Compares reverse-mode gradients of the scalar built by `f` against
/// central differences with step `h`, one entry per parameter tensor.
///
/// `f` receives a fresh graph and the bound parameter leaves on every call.
/// It must be deterministic; two evaluations at the same point that differ
/// produce [`AutodiffError::NonDeterministic`].
pub fn gradient_check<F>(
    params: &mut ParamSet,
    h: f64,
    mut f: F,
) -> Result<Vec<TensorGradError>, AutodiffError>
where
    F: FnMut(&mut Graph, &[Var]) -> Result<Var, AutodiffError>,
{
    if !(h > 0.0) {
        return Err(AutodiffError::InvalidArgument(format!(
            "finite-difference step must be positive, got {h}"
        )));
    }
    let first = evaluate(params, &mut f)?;
    let second = evaluate(params, &mut f)?;
    if first.to_bits() != second.to_bits() {
        return Err(AutodiffError::NonDeterministic { first, second });
    }

    let mut g = Graph::new();
    let vars = params.bind(&mut g);
    let root = f(&mut g, &vars)?;
    g.backward(root)?;
    let analytic = params.grads(&g, &vars);

    let mut report = Vec::with_capacity(params.len());
    for (ti, grad) in analytic.iter().enumerate() {
        let mut worst: f64 = 0.0;
        for j in 0..params.tensors()[ti].numel() {
            let original = params.tensors()[ti].data()[j];
            params.tensors_mut()[ti].data_mut()[j] = original + h;
            let plus = evaluate(params, &mut f);
            params.tensors_mut()[ti].data_mut()[j] = original - h;
            let minus = evaluate(params, &mut f);
            params.tensors_mut()[ti].data_mut()[j] = original;
            let numeric = (plus? - minus?) / (2.0 * h);
            worst = worst.max(relative_error(grad.data()[j], numeric));
        }
        report.push(TensorGradError {
            name: params.names()[ti].clone(),
            max_relative_error: worst,
        });
    }
    Ok(report)
}
