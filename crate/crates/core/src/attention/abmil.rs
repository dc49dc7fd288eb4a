use rand::Rng;

use super::check_nonempty;
use crate::autodiff::{uniform_fan_in, ParamId, ParamStore, Tape, Var};
use crate::error::{dim_err, Error, Result};

/// Tanh attention scorer: `a_i = wᵀ tanh(Vᵀ z_i)`.
#[derive(Clone, Debug, PartialEq)]
pub struct AbmilParams {
    /// `[d_z, h]`
    pub v: ParamId,
    /// `[h, 1]`
    pub w: ParamId,
    pub d_z: usize,
    pub hidden: usize,
}

impl AbmilParams {
    pub fn init<R: Rng + ?Sized>(store: &mut ParamStore, prefix: &str, d_z: usize, hidden: usize, rng: &mut R) -> Result<Self> {
        if hidden == 0 {
            return Err(Error::Config("attention pooling needs a hidden size >= 1".into()));
        }
        let v = store.add(format!("{prefix}.V"), uniform_fan_in(&[d_z, hidden], d_z, rng))?;
        let w = store.add(format!("{prefix}.w"), uniform_fan_in(&[hidden, 1], hidden, rng))?;
        Ok(Self { v, w, d_z, hidden })
    }
}

/// Attention pooling: returns the pooled `[1, d_z]` embedding and the
/// `[1, n]` instance weights.
pub fn abmil_pool(tape: &mut Tape, store: &ParamStore, params: &AbmilParams, z: Var) -> Result<(Var, Var)> {
    check_nonempty(tape, z)?;
    let (_, d) = tape.value(z).dims2()?;
    if d != params.d_z {
        return dim_err(format!("pooling input has {d} features, expected {}", params.d_z));
    }
    let v = tape.param(store, params.v);
    let w = tape.param(store, params.w);
    let h = tape.matmul(z, v)?;
    let h = tape.tanh(h);
    let a = tape.matmul(h, w)?;
    let a = tape.transpose(a)?;
    let alpha = tape.softmax_rows(a)?;
    let pooled = tape.matmul(alpha, z)?;
    Ok((pooled, alpha))
}
