use super::{Graph, Tensor, Var};
use crate::error::{Error, Result};

/// Compares the reverse-mode gradient of a scalar function against central
/// finite differences.
///
/// `f` records its computation on the supplied graph starting from the leaf
/// holding `x`. Returns `max_i |analytic_i - numeric_i| / max(1, |numeric_i|)`.
pub fn finite_difference_check<F>(f: F, x: &Tensor<f64>, eps: f64) -> Result<f64>
where
    F: Fn(&mut Graph<f64>, Var) -> Result<Var>,
{
    if !(eps > 0.0) {
        return Err(Error::invalid(format!("finite-difference step must be positive, got {eps}")));
    }
    let eval = |point: Tensor<f64>| -> Result<f64> {
        let mut g = Graph::new();
        let v = g.constant(point);
        let out = f(&mut g, v)?;
        let val = g.value(out).item()?;
        if !val.is_finite() {
            return Err(Error::NonFinite(format!("function value {val} is not finite")));
        }
        Ok(val)
    };

    let mut g = Graph::new();
    let xv = g.variable(x.clone());
    let out = f(&mut g, xv)?;
    let fx = g.value(out).item()?;
    if !fx.is_finite() {
        return Err(Error::NonFinite(format!("function value {fx} is not finite")));
    }
    g.backward(out)?;
    let analytic = g.grad(xv).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; x.numel()]);

    let mut worst = 0.0f64;
    let mut probe = x.clone();
    for i in 0..x.numel() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + eps;
        let fp = eval(probe.clone())?;
        probe.data_mut()[i] = orig - eps;
        let fm = eval(probe.clone())?;
        probe.data_mut()[i] = orig;
        let numeric = (fp - fm) / (2.0 * eps);
        let rel = (analytic[i] - numeric).abs() / numeric.abs().max(1.0);
        worst = worst.max(rel);
    }
    Ok(worst)
}
