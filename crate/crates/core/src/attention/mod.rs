//! Attention aggregators: distance-aware self-attention and the baselines it
//! is compared against.
//!
//! All operators are built on the [`Tape`] so they can be trained end to end.
//! Relative biases share one composition routine: a bag-specific set of
//! `n × n` weight matrices `W_m` and per-role vectors `c_m`, giving
//! `b_ij = Σ_m W_m[i, j] · c_m`. Distance-aware attention uses the two
//! matrices `φ(D)` and `1 − φ(D)`; the discrete baseline uses one 0/1 mask per
//! distance bin.

mod abmil;
mod das;
mod discrete;
mod export;

pub use abmil::{abmil_pool, AbmilParams};
pub use das::{
    compat_efficient, compat_expanded, das_att, DasAttConfig, DasAttParams, DasAttWeights, PhiMode,
};
pub use discrete::{bin_index, discrete_rel_sa, equal_width_edges, DiscreteRelConfig, DiscreteRelParams};
pub use export::{attention_csv, attention_pgm};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{sigmoid, uniform_fan_in, ParamId, ParamStore, Tape, Var};
use crate::error::{dim_err, Result};

/// Which relative bias terms are active.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Roles {
    pub key: bool,
    pub query: bool,
    pub value: bool,
}

impl Roles {
    pub const ALL: Roles = Roles { key: true, query: true, value: true };
    pub const NONE: Roles = Roles { key: false, query: false, value: false };

    pub fn any(self) -> bool {
        self.key || self.query || self.value
    }
}

impl Default for Roles {
    fn default() -> Self {
        Self::ALL
    }
}

/// `σ(β·δ̃ + θ)` for a normalized distance `δ̃`.
pub fn phi(distance: f64, beta: f64, theta: f64) -> f64 {
    sigmoid(beta * distance + theta)
}

/// `φ(δ̃)·u + (1 − φ(δ̃))·v`
pub fn bias_vector(distance: f64, u: &[f64], v: &[f64], beta: f64, theta: f64) -> Result<Vec<f64>> {
    if u.len() != v.len() {
        return dim_err(format!("bias endpoints have lengths {} and {}", u.len(), v.len()));
    }
    let p = phi(distance, beta, theta);
    Ok(u.iter().zip(v).map(|(a, b)| p * a + (1.0 - p) * b).collect())
}

/// Query, key and value projections `d_x → d_z`.
#[derive(Clone, Debug, PartialEq)]
pub struct SaProjections {
    pub wq: ParamId,
    pub wk: ParamId,
    pub wv: ParamId,
    pub d_x: usize,
    pub d_z: usize,
}

impl SaProjections {
    pub fn init<R: Rng + ?Sized>(
        store: &mut ParamStore,
        prefix: &str,
        d_x: usize,
        d_z: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let mut w = |name: &str, rng: &mut R| store.add(format!("{prefix}.{name}"), uniform_fan_in(&[d_x, d_z], d_x, rng));
        let wq = w("WQ", rng)?;
        let wk = w("WK", rng)?;
        let wv = w("WV", rng)?;
        Ok(Self { wq, wk, wv, d_x, d_z })
    }

    fn project(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<(Var, Var, Var)> {
        let (_, d) = tape.value(x).dims2()?;
        if d != self.d_x {
            return dim_err(format!("attention input has {d} features, projections expect {}", self.d_x));
        }
        let (wq, wk, wv) = (tape.param(store, self.wq), tape.param(store, self.wk), tape.param(store, self.wv));
        Ok((tape.matmul(x, wq)?, tape.matmul(x, wk)?, tape.matmul(x, wv)?))
    }
}

/// Output of a self-attention layer.
#[derive(Clone, Copy, Debug)]
pub struct Attended {
    /// `[n, d_z]`
    pub z: Var,
    /// Row-stochastic `[n, n]` attention weights.
    pub alpha: Var,
}

/// Relative bias decomposition for one bag. Role vectors are `[d_z]`
/// parameters; an empty role list means that role is disabled.
pub(crate) struct Basis {
    pub weights: Vec<Var>,
    pub key: Vec<Var>,
    pub query: Vec<Var>,
    pub value: Vec<Var>,
    /// The weight matrices have disjoint support, so cross products vanish.
    pub disjoint: bool,
}

fn column(tape: &mut Tape, v: Var) -> Result<Var> {
    let d = tape.value(v).len();
    tape.reshape(v, &[d, 1])
}

/// Compatibility matrix, efficient form: `A = Q Kᵀ` once, then each bias
/// contributes through `n` dot products per basis vector.
pub(crate) fn compatibility(
    tape: &mut Tape,
    q: Var,
    k: Var,
    basis: Option<&Basis>,
    subtract_product: bool,
    d_z: usize,
) -> Result<Var> {
    let n = tape.shape(q)[0];
    let mut e = tape.matmul_nt(q, k)?;
    if let Some(b) = basis {
        for (&w, &c) in b.weights.iter().zip(&b.key) {
            let c = column(tape, c)?;
            let qc = tape.matmul(q, c)?;
            let qc = tape.broadcast_col(qc, n)?;
            let t = tape.mul(w, qc)?;
            e = tape.add(e, t)?;
        }
        for (&w, &c) in b.weights.iter().zip(&b.query) {
            let c = column(tape, c)?;
            let kc = tape.matmul(k, c)?;
            let kc = tape.transpose(kc)?;
            let kc = tape.broadcast_row(kc, n)?;
            let t = tape.mul(w, kc)?;
            e = tape.add(e, t)?;
        }
        if !subtract_product && !b.key.is_empty() && !b.query.is_empty() {
            for (m, &cq) in b.query.iter().enumerate() {
                for (l, &ck) in b.key.iter().enumerate() {
                    if b.disjoint && m != l {
                        continue;
                    }
                    let ck = column(tape, ck)?;
                    let dq = tape.value(cq).len();
                    let cq = tape.reshape(cq, &[1, dq])?;
                    let s = tape.matmul(cq, ck)?;
                    let ww = tape.mul(b.weights[m], b.weights[l])?;
                    let t = tape.mul_scalar(ww, s)?;
                    e = tape.add(e, t)?;
                }
            }
        }
    }
    Ok(tape.scale(e, 1.0 / (d_z as f64).sqrt()))
}

/// Softmax over compatibilities and value mixing, with the value bias
/// `Σ_j α_ij b^V_ij = Σ_m rowsum(α ∘ W_m) · c_mᵀ`.
pub(crate) fn attend(
    tape: &mut Tape,
    store: &ParamStore,
    proj: &SaProjections,
    x: Var,
    basis: Option<&Basis>,
    subtract_product: bool,
) -> Result<Attended> {
    let (q, k, v) = proj.project(tape, store, x)?;
    let e = compatibility(tape, q, k, basis, subtract_product, proj.d_z)?;
    let alpha = tape.softmax_rows(e)?;
    let mut z = tape.matmul(alpha, v)?;
    if let Some(b) = basis {
        for (&w, &c) in b.weights.iter().zip(&b.value) {
            let aw = tape.mul(alpha, w)?;
            let s = tape.row_sum(aw)?;
            let c = tape.reshape(c, &[1, proj.d_z])?;
            let t = tape.matmul(s, c)?;
            z = tape.add(z, t)?;
        }
    }
    Ok(Attended { z, alpha })
}

/// Single-head scaled dot-product self-attention.
pub fn vanilla_sa(tape: &mut Tape, store: &ParamStore, proj: &SaProjections, x: Var) -> Result<Attended> {
    check_nonempty(tape, x)?;
    attend(tape, store, proj, x, None, true)
}

pub(crate) fn check_nonempty(tape: &Tape, x: Var) -> Result<()> {
    match tape.value(x).dims2() {
        Ok(_) => Ok(()),
        Err(_) => Err(crate::Error::Precondition(format!(
            "attention expects an [n, d] matrix with n >= 1, got {:?}",
            tape.shape(x)
        ))),
    }
}

pub(crate) fn check_distances(tape: &Tape, x: Var, d: &crate::autodiff::Tensor) -> Result<()> {
    let n = tape.shape(x)[0];
    if d.shape() != [n, n] {
        return dim_err(format!("distance matrix {:?} does not match {n} instances", d.shape()));
    }
    Ok(())
}
