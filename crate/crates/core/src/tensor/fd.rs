//! Central finite differences — the independent gradient oracle used by
//! tests to check every backward rule.

use crate::error::Result;

/// d f / d x_i ≈ (f(x + e_i ε) − f(x − e_i ε)) / (2ε), one coordinate at a
/// time. `f` must be a pure function of its argument.
pub fn finite_diff_grad<F>(mut f: F, x: &[f64], eps: f64) -> Result<Vec<f64>>
where
    F: FnMut(&[f64]) -> Result<f64>,
{
    let mut grad = vec![0.0; x.len()];
    let mut xp = x.to_vec();
    for i in 0..x.len() {
        let orig = xp[i];
        xp[i] = orig + eps;
        let fp = f(&xp)?;
        xp[i] = orig - eps;
        let fm = f(&xp)?;
        xp[i] = orig;
        grad[i] = (fp - fm) / (2.0 * eps);
    }
    Ok(grad)
}

/// max_i |a_i − b_i| / max(1, |a_i|, |b_i|): relative where the values are
/// large, absolute near zero.
pub fn max_rel_err(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs() / f64::max(1.0, f64::max(x.abs(), y.abs())))
        .fold(0.0, f64::max)
}
