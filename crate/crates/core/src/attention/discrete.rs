use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{attend, check_distances, check_nonempty, Attended, Basis, Roles, SaProjections};
use crate::autodiff::{normal, ParamId, ParamStore, Tape, Tensor, Var};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DiscreteRelConfig {
    pub d_x: usize,
    pub d_z: usize,
    pub bins: usize,
    /// Upper end of the equal-width binning, in the same units as the distances.
    pub max_distance: f64,
    pub roles: Roles,
    pub subtract_product: bool,
    pub embedding_std: f64,
}

impl Default for DiscreteRelConfig {
    fn default() -> Self {
        Self {
            d_x: 32,
            d_z: 32,
            bins: 10,
            max_distance: 128f64.hypot(128.0),
            roles: Roles::ALL,
            subtract_product: true,
            embedding_std: 0.02,
        }
    }
}

/// `k + 1` equally spaced edges over `[0, max]`.
pub fn equal_width_edges(k: usize, max: f64) -> Result<Vec<f64>> {
    if k == 0 {
        return Err(Error::Config("discrete relative attention needs at least one bin".into()));
    }
    if !(max > 0.0) {
        return Err(Error::Config(format!("bin range must be positive, got {max}")));
    }
    Ok((0..=k).map(|b| max * b as f64 / k as f64).collect())
}

/// Zero-based bin of `delta` under half-open intervals `[e_b, e_{b+1})`.
/// Values below the first edge fall in the first bin, values at or past the
/// last edge in the last.
pub fn bin_index(delta: f64, edges: &[f64]) -> usize {
    let k = edges.len().saturating_sub(1).max(1);
    let at_or_below = edges.partition_point(|&e| e <= delta);
    at_or_below.saturating_sub(1).min(k - 1)
}

#[derive(Clone, Debug, PartialEq)]
pub struct DiscreteRelParams {
    pub proj: SaProjections,
    pub edges: Vec<f64>,
    pub rk: Vec<ParamId>,
    pub rq: Vec<ParamId>,
    pub rv: Vec<ParamId>,
    pub config: DiscreteRelConfig,
}

impl DiscreteRelParams {
    pub fn init<R: Rng + ?Sized>(store: &mut ParamStore, prefix: &str, config: DiscreteRelConfig, rng: &mut R) -> Result<Self> {
        let edges = equal_width_edges(config.bins, config.max_distance)?;
        Self::with_edges(store, prefix, config, edges, rng)
    }

    /// Custom bin edges; they must be strictly increasing.
    pub fn with_edges<R: Rng + ?Sized>(
        store: &mut ParamStore,
        prefix: &str,
        mut config: DiscreteRelConfig,
        edges: Vec<f64>,
        rng: &mut R,
    ) -> Result<Self> {
        if edges.len() < 2 {
            return Err(Error::Config("discrete relative attention needs at least one bin".into()));
        }
        if edges.windows(2).any(|w| !(w[0] < w[1])) {
            return Err(Error::Config(format!("bin edges must be strictly increasing: {edges:?}")));
        }
        config.bins = edges.len() - 1;
        let proj = SaProjections::init(store, prefix, config.d_x, config.d_z, rng)?;
        let mut role = |tag: &str, on: bool, rng: &mut R| -> Result<Vec<ParamId>> {
            (0..config.bins)
                .map(|b| {
                    let id = store.add(format!("{prefix}.r{tag}{b}"), normal(&[config.d_z], config.embedding_std, rng))?;
                    store.set_trainable(id, on);
                    Ok(id)
                })
                .collect()
        };
        let rk = role("K", config.roles.key, rng)?;
        let rq = role("Q", config.roles.query, rng)?;
        let rv = role("V", config.roles.value, rng)?;
        Ok(Self { proj, edges, rk, rq, rv, config })
    }

    fn basis(&self, tape: &mut Tape, store: &ParamStore, d: &Tensor) -> Option<Basis> {
        let r = self.config.roles;
        if !r.any() {
            return None;
        }
        let n = d.shape()[0];
        let bins: Vec<usize> = d.data().iter().map(|&v| bin_index(v, &self.edges)).collect();
        let mut basis = Basis { weights: Vec::new(), key: Vec::new(), query: Vec::new(), value: Vec::new(), disjoint: true };
        for b in 0..self.config.bins {
            if !bins.contains(&b) {
                continue;
            }
            let mask = bins.iter().map(|&x| if x == b { 1.0 } else { 0.0 }).collect();
            basis.weights.push(tape.constant(Tensor::from_parts(vec![n, n], mask)));
            if r.key {
                basis.key.push(tape.param(store, self.rk[b]));
            }
            if r.query {
                basis.query.push(tape.param(store, self.rq[b]));
            }
            if r.value {
                basis.value.push(tape.param(store, self.rv[b]));
            }
        }
        Some(basis)
    }
}

/// Self-attention with one learned bias vector per distance bin and role.
pub fn discrete_rel_sa(
    tape: &mut Tape,
    store: &ParamStore,
    params: &DiscreteRelParams,
    x: Var,
    d: &Tensor,
) -> Result<Attended> {
    check_nonempty(tape, x)?;
    check_distances(tape, x, d)?;
    let basis = params.basis(tape, store, d);
    attend(tape, store, &params.proj, x, basis.as_ref(), params.config.subtract_product)
}
