use super::{Graph, Tensor, Var};
use crate::error::{Error, Result};

/// Compares the tape gradient of a scalar function against central
/// differences with step `eps`, in 64-bit.
///
/// Returns `max_i |analytic_i − numeric_i| / max(|analytic_i|, |numeric_i|, 1e-12)`.
pub fn finite_diff_check<F>(f: F, x: &Tensor<f64>, eps: f64) -> Result<f64>
where
    F: Fn(&mut Graph<f64>, Var) -> Result<Var>,
{
    let eval = |data: Vec<f64>| -> Result<f64> {
        let mut g = Graph::new();
        let v = g.input(x.shape(), data, false)?;
        let out = f(&mut g, v)?;
        let val = g.value(out);
        if val.len() != 1 {
            return Err(Error::Contract(format!(
                "finite_diff_check needs a scalar function, got {} values",
                val.len()
            )));
        }
        if !val[0].is_finite() {
            return Err(Error::Domain(format!("f(x) is not finite: {}", val[0])));
        }
        Ok(val[0])
    };

    let mut g = Graph::new();
    let v = g.input(x.shape(), x.data().to_vec(), true)?;
    let out = f(&mut g, v)?;
    if g.value(out).len() == 1 && !g.value(out)[0].is_finite() {
        return Err(Error::Domain("f(x) is not finite".into()));
    }
    g.backward(out)?;
    let analytic = g
        .grad(v)
        .map(<[f64]>::to_vec)
        .unwrap_or_else(|| vec![0.0; x.len()]);

    let mut worst = 0.0f64;
    for i in 0..x.len() {
        let mut plus = x.data().to_vec();
        plus[i] += eps;
        let mut minus = x.data().to_vec();
        minus[i] -= eps;
        let numeric = (eval(plus)? - eval(minus)?) / (2.0 * eps);
        let denom = analytic[i].abs().max(numeric.abs()).max(1e-12);
        worst = worst.max((analytic[i] - numeric).abs() / denom);
    }
    Ok(worst)
}
