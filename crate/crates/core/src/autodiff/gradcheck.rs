use super::{AutodiffError, Tape, Tensor, Var};

/// Max over coordinates of `|analytic − central difference| / max(1, |analytic|)`.
///
/// `f` must build a scalar from its input on the supplied tape. It is called
/// once for the analytic gradient and twice per coordinate for the numeric one.
pub fn grad_check<F>(f: F, x: &Tensor, eps: f64) -> Result<f64, AutodiffError>
where
    F: for<'t> Fn(&'t Tape, Var<'t>) -> Result<Var<'t>, AutodiffError>,
{
    let tape = Tape::new();
    let xv = tape.param(x.clone());
    let y = f(&tape, xv)?;
    let grads = tape.backward(y)?;
    let analytic = grads.get_or_zeros(xv);

    let eval = |t: &Tensor| -> Result<f64, AutodiffError> {
        let tape = Tape::new();
        let v = tape.constant(t.clone());
        Ok(f(&tape, v)?.item())
    };

    let mut worst: f64 = 0.0;
    let mut probe = x.clone();
    for i in 0..x.len() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + eps;
        let fp = eval(&probe)?;
        probe.data_mut()[i] = orig - eps;
        let fm = eval(&probe)?;
        probe.data_mut()[i] = orig;
        let numeric = (fp - fm) / (2.0 * eps);
        let a = analytic.data()[i];
        worst = worst.max((a - numeric).abs() / a.abs().max(1.0));
    }
    Ok(worst)
}
