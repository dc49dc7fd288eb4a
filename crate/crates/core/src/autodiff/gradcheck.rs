use super::params::{ParamId, ParamStore};
use super::tape::{Tape, Var};
use crate::error::{Error, Result};

/// Worst coordinate found by [`grad_check`].
#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub worst_param: String,
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub coordinates: usize,
}

/// `|a − n| / max(|a|, |n|, 1e-8)`
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

/// Compares tape gradients against central differences for every coordinate
/// of every trainable parameter in `store`.
///
/// `forward` must rebuild the computation from the store on the given tape
/// and return the scalar loss node. It has to be deterministic; two
/// evaluations at the unperturbed point are compared bit for bit.
pub fn grad_check<F>(store: &mut ParamStore, h: f64, mut forward: F) -> Result<GradCheckReport>
where
    F: FnMut(&ParamStore, &mut Tape) -> Result<Var>,
{
    let mut tape = Tape::new();
    let loss = forward(store, &mut tape)?;
    let base = tape.value(loss).item()?;
    let again = eval(&mut forward, store)?;
    if base.to_bits() != again.to_bits() {
        return Err(Error::Determinism(format!(
            "two forward passes gave {base:e} and {again:e}"
        )));
    }
    let analytic = tape.backward(loss)?.for_params(store);
    drop(tape);

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst_param: String::new(),
        worst_index: 0,
        analytic: 0.0,
        numeric: 0.0,
        coordinates: 0,
    };
    let ids: Vec<ParamId> = store.ids().collect();
    for id in ids {
        if !store.get(id).trainable {
            continue;
        }
        for k in 0..store.get(id).value.len() {
            let orig = store.get(id).value.data()[k];
            store.get_mut(id).value.data_mut()[k] = orig + h;
            let plus = eval(&mut forward, store);
            store.get_mut(id).value.data_mut()[k] = orig - h;
            let minus = eval(&mut forward, store);
            store.get_mut(id).value.data_mut()[k] = orig;
            let numeric = (plus? - minus?) / (2.0 * h);
            let a = analytic[id.index()].data()[k];
            let err = relative_error(a, numeric);
            report.coordinates += 1;
            if err > report.max_rel_error || report.worst_param.is_empty() {
                report.max_rel_error = err;
                report.worst_param = store.get(id).name.clone();
                report.worst_index = k;
                report.analytic = a;
                report.numeric = numeric;
            }
        }
    }
    Ok(report)
}

fn eval<F>(forward: &mut F, store: &ParamStore) -> Result<f64>
where
    F: FnMut(&ParamStore, &mut Tape) -> Result<Var>,
{
    let mut tape = Tape::new();
    let loss = forward(store, &mut tape)?;
    tape.value(loss).item()
}
