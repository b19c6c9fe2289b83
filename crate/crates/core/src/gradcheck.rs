//! Central finite-difference gradient oracle.
//!
//! The oracle only evaluates forward values on fresh no-grad tapes, so it is
//! independent of every backward rule it checks.

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::tensor::Tensor;

pub const DEFAULT_STEP: f64 = 1e-5;

/// `|a - n| / max(1e-12, |a| + |n|)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / (analytic.abs() + numeric.abs()).max(1e-12)
}

fn scalar_of(tape: &Tape, v: Var) -> Result<f64> {
    let t = tape.value(v);
    if !t.is_scalar() {
        return Err(Error::contract(format!(
            "gradcheck function must return a scalar, got shape {:?}",
            t.shape()
        )));
    }
    Ok(t.item())
}

/// Maximum relative error between the tape gradient of `f` at `x` and the
/// central difference `(f(x + h) - f(x - h)) / 2h`, over every entry of `x`.
pub fn finite_diff_gradcheck<F>(f: F, x: &Tensor, step: f64) -> Result<f64>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    let mut tape = Tape::new();
    let xv = tape.leaf(x.clone());
    let loss = f(&mut tape, xv)?;
    scalar_of(&tape, loss)?;
    let grads = tape.backward(loss)?;
    let zeros = vec![0.0; x.numel()];
    let analytic = grads.get(xv).unwrap_or(&zeros);

    let eval = |t: Tensor| -> Result<f64> {
        let mut tape = Tape::no_grad();
        let v = tape.leaf(t);
        let out = f(&mut tape, v)?;
        scalar_of(&tape, out)
    };
    let mut worst: f64 = 0.0;
    for i in 0..x.numel() {
        let mut plus = x.clone();
        plus.data_mut()[i] += step;
        let mut minus = x.clone();
        minus.data_mut()[i] -= step;
        let numeric = (eval(plus)? - eval(minus)?) / (2.0 * step);
        worst = worst.max(relative_error(analytic[i], numeric));
    }
    Ok(worst)
}

/// Entry indices probed for a tensor of `numel` values: all of them when
/// `numel <= max_entries`, otherwise `max_entries` evenly spaced ones.
pub fn probe_indices(numel: usize, max_entries: usize) -> Vec<usize> {
    if numel <= max_entries {
        (0..numel).collect()
    } else {
        (0..max_entries).map(|j| j * numel / max_entries).collect()
    }
}

/// Agreement between tape and finite-difference gradients for one parameter tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamGradcheck {
    pub name: String,
    pub entries: usize,
    /// Max over probed entries of [`relative_error`].
    pub max_entry_error: f64,
    /// `‖a − n‖₂ / max(1e-12, ‖a‖₂ + ‖n‖₂)` over the probed entries.
    pub norm_error: f64,
}

/// Gradient of `f` with respect to each parameter in `ids`, compared with
/// central differences. Parameters with more than `max_entries` values are
/// probed at evenly spaced entries.
pub fn gradcheck_params<F>(
    f: F,
    store: &mut ParamStore,
    ids: &[ParamId],
    step: f64,
    max_entries: usize,
) -> Result<Vec<ParamGradcheck>>
where
    F: Fn(&mut Tape, &ParamStore) -> Result<Var>,
{
    store.zero_grads();
    let mut tape = Tape::new();
    let loss = f(&mut tape, store)?;
    scalar_of(&tape, loss)?;
    tape.backward(loss)?.accumulate_into(store);

    let mut report = Vec::with_capacity(ids.len());
    for &id in ids {
        let analytic = store
            .get(id)
            .grad
            .as_ref()
            .map(|g| g.data().to_vec())
            .unwrap_or_else(|| vec![0.0; store.get(id).value.numel()]);
        let probes = probe_indices(analytic.len(), max_entries);
        let (mut worst, mut diff2, mut a2, mut n2) = (0.0f64, 0.0, 0.0, 0.0);
        for &i in &probes {
            let orig = store.get(id).value.data()[i];
            store.get_mut(id).value.data_mut()[i] = orig + step;
            let up = eval_no_grad(&f, store)?;
            store.get_mut(id).value.data_mut()[i] = orig - step;
            let down = eval_no_grad(&f, store)?;
            store.get_mut(id).value.data_mut()[i] = orig;
            let numeric = (up - down) / (2.0 * step);
            worst = worst.max(relative_error(analytic[i], numeric));
            diff2 += (analytic[i] - numeric).powi(2);
            a2 += analytic[i].powi(2);
            n2 += numeric.powi(2);
        }
        report.push(ParamGradcheck {
            name: store.get(id).name.clone(),
            entries: probes.len(),
            max_entry_error: worst,
            norm_error: diff2.sqrt() / (a2.sqrt() + n2.sqrt()).max(1e-12),
        });
    }
    store.zero_grads();
    Ok(report)
}

fn eval_no_grad<F>(f: &F, store: &ParamStore) -> Result<f64>
where
    F: Fn(&mut Tape, &ParamStore) -> Result<Var>,
{
    let mut tape = Tape::no_grad();
    let v = f(&mut tape, store)?;
    scalar_of(&tape, v)
}
