use super::tape::{Tape, Var};
use super::tensor::{Gradients, ParamStore, Tensor};
use super::AutodiffError;

pub const GRAD_CHECK_STEP: f64 = 1e-5;

/// Central-difference gradient of `f` at `point`.
pub fn finite_difference(
    point: &Tensor,
    mut f: impl FnMut(&Tensor) -> Result<f64, AutodiffError>,
) -> Result<Vec<f64>, AutodiffError> {
    let mut probe = point.clone();
    let mut out = Vec::with_capacity(point.len());
    for i in 0..point.len() {
        let x = point.data()[i];
        probe.data_mut()[i] = x + GRAD_CHECK_STEP;
        let up = f(&probe)?;
        probe.data_mut()[i] = x - GRAD_CHECK_STEP;
        let down = f(&probe)?;
        probe.data_mut()[i] = x;
        if !up.is_finite() || !down.is_finite() {
            return Err(AutodiffError::NonFinite("grad_check probe"));
        }
        out.push((up - down) / (2.0 * GRAD_CHECK_STEP));
    }
    Ok(out)
}

/// Max over coordinates of `|analytic - numeric| / (|analytic| + 1e-8)`.
///
/// `f` builds a scalar on the given tape from the input leaf; it is evaluated
/// once with the tape for the analytic gradient and twice per coordinate for
/// the central difference.
pub fn grad_check(
    point: &Tensor,
    f: impl Fn(&mut Tape<'_>, Var) -> Result<Var, AutodiffError>,
) -> Result<f64, AutodiffError> {
    grad_check_in(&ParamStore::new(), point, f)
}

/// [`grad_check`] with parameters from `store` available to `f` (held fixed).
pub fn grad_check_in(
    store: &ParamStore,
    point: &Tensor,
    f: impl Fn(&mut Tape<'_>, Var) -> Result<Var, AutodiffError>,
) -> Result<f64, AutodiffError> {
    let analytic = {
        let mut tape = Tape::new(store);
        let x = tape.input(point);
        let y = f(&mut tape, x)?;
        tape.check_finite(y, "grad_check objective")?;
        let g = tape.backward_into(y, &mut Gradients::new())?;
        g.get(x).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; point.len()])
    };
    let numeric = finite_difference(point, |p| {
        let mut tape = Tape::new(store);
        let x = tape.input(p);
        let y = f(&mut tape, x)?;
        Ok(tape.scalar(y))
    })?;
    Ok(max_relative_error(&analytic, &numeric))
}

/// Gradient check over every parameter scalar in `store`.
///
/// `f` must rebuild the objective from scratch (including any state derived
/// from parameters) each time it is called.
pub fn grad_check_params<E: From<AutodiffError>>(
    store: &ParamStore,
    f: impl Fn(&mut Tape<'_>) -> Result<Var, E>,
) -> Result<f64, E> {
    let mut grads = Gradients::new();
    {
        let mut tape = Tape::new(store);
        let y = f(&mut tape)?;
        tape.check_finite(y, "grad_check objective")?;
        tape.backward_into(y, &mut grads)?;
    }
    let mut probe = store.clone();
    let mut worst = 0.0f64;
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        let analytic = grads
            .get(id)
            .map(<[f64]>::to_vec)
            .unwrap_or_else(|| vec![0.0; store.value(id).len()]);
        let mut numeric = Vec::with_capacity(analytic.len());
        for i in 0..analytic.len() {
            let x = store.value(id).data()[i];
            let mut eval = |v: f64| -> Result<f64, E> {
                probe.get_mut(id).value.data_mut()[i] = v;
                let mut tape = Tape::new(&probe);
                let y = f(&mut tape)?;
                Ok(tape.scalar(y))
            };
            let up = eval(x + GRAD_CHECK_STEP)?;
            let down = eval(x - GRAD_CHECK_STEP)?;
            probe.get_mut(id).value.data_mut()[i] = x;
            if !up.is_finite() || !down.is_finite() {
                return Err(AutodiffError::NonFinite("grad_check probe").into());
            }
            numeric.push((up - down) / (2.0 * GRAD_CHECK_STEP));
        }
        worst = worst.max(max_relative_error(&analytic, &numeric));
    }
    Ok(worst)
}

pub(crate) fn max_relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n).abs() / (a.abs() + 1e-8))
        .fold(0.0, f64::max)
}
