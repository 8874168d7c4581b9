use super::{ParamId, ParamStore, Tape, Var};
use crate::error::{Error, Result};

/// Compares reverse-mode gradients of a scalar computation against central
/// differences, returning the largest `|analytic − fd| / max(1, |fd|)` over
/// every scalar entry of `params`.
///
/// `f` rebuilds the computation from the store on a fresh tape. It must be
/// deterministic; two evaluations at the same point that disagree bitwise are
/// reported as a contract violation.
pub fn grad_check<F>(store: &ParamStore, params: &[ParamId], h: f64, f: F) -> Result<f64>
where
    F: Fn(&ParamStore, &mut Tape) -> Result<Var>,
{
    if !(1e-8..=1e-4).contains(&h) {
        return Err(Error::Parameter(format!("finite-difference step {h} outside [1e-8, 1e-4]")));
    }
    let eval = |s: &ParamStore| -> Result<(Tape, Var)> {
        let mut tape = Tape::new();
        let out = f(s, &mut tape)?;
        if tape.value(out).len() != 1 {
            return Err(Error::dim("grad_check", "output is not a scalar"));
        }
        Ok((tape, out))
    };

    let (tape, out) = eval(store)?;
    let (tape2, out2) = eval(store)?;
    if tape.item(out).to_bits() != tape2.item(out2).to_bits() {
        return Err(Error::Contract(
            "computation is not deterministic; fix its random streams before checking".into(),
        ));
    }
    let grads = tape.backward(out)?;

    let mut probe = store.clone();
    let mut worst: f64 = 0.0;
    for &id in params {
        let analytic = match tape.param_var(id) {
            Some(v) => grads.get_or_zero(&tape, v),
            None => vec![0.0; store.get(id).len()],
        };
        for (k, a) in analytic.iter().enumerate() {
            let orig = store.get(id).data()[k];
            probe.get_mut(id).data_mut()[k] = orig + h;
            let (tp, op) = eval(&probe)?;
            let fp = tp.item(op);
            probe.get_mut(id).data_mut()[k] = orig - h;
            let (tm, om) = eval(&probe)?;
            let fm = tm.item(om);
            probe.get_mut(id).data_mut()[k] = orig;
            let fd = (fp - fm) / (2.0 * h);
            let err = (a - fd).abs() / fd.abs().max(1.0);
            if !err.is_finite() {
                return Err(Error::NonFinite(format!("grad_check on {}", store.name(id))));
            }
            worst = worst.max(err);
        }
    }
    Ok(worst)
}
