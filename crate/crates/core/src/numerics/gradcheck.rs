use super::{Graph, NumericsError, Tensor, Var};

/// Outcome of comparing reverse-mode gradients with central differences.
#[derive(Clone, Debug)]
pub struct GradCheck {
    pub analytic: Vec<f64>,
    pub numeric: Vec<f64>,
    /// `max_i |analytic_i − numeric_i| / max(1, |numeric_i|)`.
    pub max_rel_error: f64,
}

/// Checks the gradient of the scalar function built by `f` with respect to
/// `theta` using central differences with step `h`.
///
/// `f` receives a fresh graph and the parameter handle and returns the loss.
pub fn finite_difference_check<F>(f: F, theta: &Tensor, h: f64) -> Result<GradCheck, NumericsError>
where
    F: Fn(&mut Graph, Var) -> Result<Var, NumericsError>,
{
    if !(h > 0.0) {
        return Err(NumericsError::Parameter(format!("step must be positive, got {h}")));
    }
    let eval = |t: Tensor| -> Result<f64, NumericsError> {
        let mut g = Graph::new();
        let p = g.constant(t);
        let loss = f(&mut g, p)?;
        Ok(g.value(loss).item())
    };

    let mut g = Graph::new();
    let p = g.param(theta.clone());
    let loss = f(&mut g, p)?;
    g.backward(loss)?;
    let analytic = g
        .grad_data(p)
        .map(<[f64]>::to_vec)
        .unwrap_or_else(|| vec![0.0; theta.len()]);

    let mut numeric = Vec::with_capacity(theta.len());
    let mut probe = theta.clone();
    for i in 0..theta.len() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + h;
        let up = eval(probe.clone())?;
        probe.data_mut()[i] = orig - h;
        let down = eval(probe.clone())?;
        probe.data_mut()[i] = orig;
        numeric.push((up - down) / (2.0 * h));
    }
    let max_rel_error = analytic
        .iter()
        .zip(&numeric)
        .map(|(a, n)| (a - n).abs() / n.abs().max(1.0))
        .fold(0.0, f64::max);
    Ok(GradCheck {
        analytic,
        numeric,
        max_rel_error,
    })
}
