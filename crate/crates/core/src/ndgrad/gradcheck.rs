use super::{Array, Graph, Mode, Var};
use crate::error::{FeverError, Result};

/// Compares the reverse-mode gradient of a scalar function against central
/// finite differences.
///
/// `f` builds its output from the leaf it is handed. Returns the largest
/// `|analytic - numeric| / max(1, |numeric|)` over all coordinates of `x`.
pub fn finite_diff_check<F>(f: F, x: &Array<f64>, eps: f64) -> Result<f64>
where
    F: Fn(&mut Graph<f64>, Var) -> Result<Var>,
{
    if eps <= 0.0 {
        return Err(FeverError::InvalidArgument("finite-difference step must be positive".into()));
    }
    let eval = |point: &Array<f64>| -> Result<f64> {
        let mut g = Graph::new(Mode::Train);
        let leaf = g.param(point.clone());
        let out = f(&mut g, leaf)?;
        if g.value(out).len() != 1 {
            return Err(FeverError::InvalidArgument("finite_diff_check needs a scalar function".into()));
        }
        Ok(g.value(out).item())
    };

    let base = eval(x)?;
    if base.to_bits() != eval(x)?.to_bits() {
        return Err(FeverError::InvalidArgument(
            "function is not deterministic; fix the seed of any random op".into(),
        ));
    }

    let mut g = Graph::new(Mode::Train);
    let leaf = g.param(x.clone());
    let out = f(&mut g, leaf)?;
    let analytic = g.backward(out)?.get(leaf);

    let mut worst: f64 = 0.0;
    let mut probe = x.clone();
    for i in 0..x.len() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + eps;
        let plus = eval(&probe)?;
        probe.data_mut()[i] = orig - eps;
        let minus = eval(&probe)?;
        probe.data_mut()[i] = orig;
        let numeric = (plus - minus) / (2.0 * eps);
        let err = (analytic.data()[i] - numeric).abs() / numeric.abs().max(1.0);
        worst = worst.max(err);
    }
    Ok(worst)
}
