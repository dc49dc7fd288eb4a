use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{attend, check_distances, check_nonempty, compatibility, phi, Attended, Basis, Roles, SaProjections};
use crate::autodiff::{normal, ParamId, ParamStore, Tape, Tensor, Var};
use crate::error::{dim_err, Result};

/// How the interpolation coefficient is computed from the normalized distance.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PhiMode {
    /// `σ(β·δ̃ + θ)` with learned `β`, `θ`.
    #[default]
    Sigmoid,
    /// `φ(δ̃) = δ̃`; `β` and `θ` are unused and frozen.
    Identity,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DasAttConfig {
    pub d_x: usize,
    pub d_z: usize,
    pub roles: Roles,
    pub subtract_product: bool,
    pub phi: PhiMode,
    /// Random u/v that are never trained.
    pub freeze_embeddings: bool,
    /// Distances are divided by this before `φ`; the canvas diagonal by default.
    pub distance_scale: f64,
    pub init_beta: f64,
    pub init_theta: f64,
    pub embedding_std: f64,
}

impl Default for DasAttConfig {
    fn default() -> Self {
        Self {
            d_x: 32,
            d_z: 32,
            roles: Roles::ALL,
            subtract_product: true,
            phi: PhiMode::Sigmoid,
            freeze_embeddings: false,
            distance_scale: 128f64.hypot(128.0),
            init_beta: 10.0,
            init_theta: -5.0,
            embedding_std: 0.02,
        }
    }
}

/// Parameter handles for one distance-aware attention layer. All six
/// endpoint vectors and the shared `β`, `θ` always exist; the ones a
/// configuration does not use are marked non-trainable.
#[derive(Clone, Debug, PartialEq)]
pub struct DasAttParams {
    pub proj: SaProjections,
    pub uk: ParamId,
    pub vk: ParamId,
    pub uq: ParamId,
    pub vq: ParamId,
    pub uv: ParamId,
    pub vv: ParamId,
    pub beta: ParamId,
    pub theta: ParamId,
    pub config: DasAttConfig,
}

impl DasAttParams {
    pub fn init<R: Rng + ?Sized>(store: &mut ParamStore, prefix: &str, config: DasAttConfig, rng: &mut R) -> Result<Self> {
        if config.d_x == 0 || config.d_z == 0 {
            return dim_err("attention dimensions must be >= 1");
        }
        if !(config.distance_scale > 0.0) {
            return Err(crate::Error::Config(format!("distance scale must be > 0, got {}", config.distance_scale)));
        }
        let proj = SaProjections::init(store, prefix, config.d_x, config.d_z, rng)?;
        let mut vec = |name: &str, rng: &mut R| {
            store.add(format!("{prefix}.{name}"), normal(&[config.d_z], config.embedding_std, rng))
        };
        let (uk, vk) = (vec("uK", rng)?, vec("vK", rng)?);
        let (uq, vq) = (vec("uQ", rng)?, vec("vQ", rng)?);
        let (uv, vv) = (vec("uV", rng)?, vec("vV", rng)?);
        let beta = store.add(format!("{prefix}.beta"), Tensor::scalar(config.init_beta))?;
        let theta = store.add(format!("{prefix}.theta"), Tensor::scalar(config.init_theta))?;

        let r = config.roles;
        let learn = !config.freeze_embeddings;
        for (ids, on) in [((uk, vk), r.key), ((uq, vq), r.query), ((uv, vv), r.value)] {
            store.set_trainable(ids.0, on && learn);
            store.set_trainable(ids.1, on && learn);
        }
        let phi_learned = config.phi == PhiMode::Sigmoid && r.any();
        store.set_trainable(beta, phi_learned);
        store.set_trainable(theta, phi_learned);
        Ok(Self { proj, uk, vk, uq, vq, uv, vv, beta, theta, config })
    }

    /// `φ` over the whole bag as an `[n, n]` node.
    fn phi_matrix(&self, tape: &mut Tape, store: &ParamStore, d: &Tensor) -> Result<Var> {
        let scale = self.config.distance_scale;
        let dn = tape.constant(d.map(|v| v / scale));
        match self.config.phi {
            PhiMode::Identity => Ok(dn),
            PhiMode::Sigmoid => {
                let beta = tape.param(store, self.beta);
                let theta = tape.param(store, self.theta);
                let s = tape.mul_scalar(dn, beta)?;
                let s = tape.add_scalar(s, theta)?;
                Ok(tape.sigmoid(s))
            }
        }
    }

    fn basis(&self, tape: &mut Tape, store: &ParamStore, d: &Tensor) -> Result<Option<Basis>> {
        let r = self.config.roles;
        if !r.any() {
            return Ok(None);
        }
        let p = self.phi_matrix(tape, store, d)?;
        let q = tape.one_minus(p);
        let mut pair = |on: bool, u: ParamId, v: ParamId| {
            if on {
                vec![tape.param(store, u), tape.param(store, v)]
            } else {
                Vec::new()
            }
        };
        let key = pair(r.key, self.uk, self.vk);
        let query = pair(r.query, self.uq, self.vq);
        let value = pair(r.value, self.uv, self.vv);
        Ok(Some(Basis { weights: vec![p, q], key, query, value, disjoint: false }))
    }
}

/// Compatibility matrix `E` (`[n, n]`), efficient form. `d` holds pixel
/// distances.
pub fn compat_efficient(tape: &mut Tape, store: &ParamStore, params: &DasAttParams, x: Var, d: &Tensor) -> Result<Var> {
    check_nonempty(tape, x)?;
    check_distances(tape, x, d)?;
    let (q, k, _) = params.proj.project(tape, store, x)?;
    let basis = params.basis(tape, store, d)?;
    compatibility(tape, q, k, basis.as_ref(), params.config.subtract_product, params.proj.d_z)
}

/// Distance-aware self-attention over one bag.
pub fn das_att(tape: &mut Tape, store: &ParamStore, params: &DasAttParams, x: Var, d: &Tensor) -> Result<Attended> {
    check_nonempty(tape, x)?;
    check_distances(tape, x, d)?;
    let basis = params.basis(tape, store, d)?;
    attend(tape, store, &params.proj, x, basis.as_ref(), params.config.subtract_product)
}

/// Plain-value snapshot of a layer, used by the loop reference path.
#[derive(Clone, Debug, PartialEq)]
pub struct DasAttWeights {
    pub wq: Tensor,
    pub wk: Tensor,
    pub wv: Tensor,
    pub uk: Vec<f64>,
    pub vk: Vec<f64>,
    pub uq: Vec<f64>,
    pub vq: Vec<f64>,
    pub uv: Vec<f64>,
    pub vv: Vec<f64>,
    pub beta: f64,
    pub theta: f64,
    pub config: DasAttConfig,
}

impl DasAttWeights {
    pub fn snapshot(params: &DasAttParams, store: &ParamStore) -> Self {
        let v = |id| store.value(id).data().to_vec();
        Self {
            wq: store.value(params.proj.wq).clone(),
            wk: store.value(params.proj.wk).clone(),
            wv: store.value(params.proj.wv).clone(),
            uk: v(params.uk),
            vk: v(params.vk),
            uq: v(params.uq),
            vq: v(params.vq),
            uv: v(params.uv),
            vv: v(params.vv),
            beta: store.value(params.beta).data()[0],
            theta: store.value(params.theta).data()[0],
            config: params.config.clone(),
        }
    }

    fn coefficient(&self, delta: f64) -> f64 {
        let dn = delta / self.config.distance_scale;
        match self.config.phi {
            PhiMode::Sigmoid => phi(dn, self.beta, self.theta),
            PhiMode::Identity => dn,
        }
    }

    /// Bias vector for one role at one distance; zeros when the role is off.
    pub fn bias(&self, on: bool, u: &[f64], v: &[f64], delta: f64) -> Vec<f64> {
        if !on || !self.config.roles.any() {
            return vec![0.0; u.len()];
        }
        let p = self.coefficient(delta);
        u.iter().zip(v).map(|(a, b)| p * a + (1.0 - p) * b).collect()
    }
}

fn project_rows(x: &Tensor, w: &Tensor) -> Result<Vec<Vec<f64>>> {
    let (n, dx) = x.dims2()?;
    let (wr, dz) = w.dims2()?;
    if dx != wr {
        return dim_err(format!("input [{n}, {dx}] against projection [{wr}, {dz}]"));
    }
    Ok((0..n)
        .map(|i| (0..dz).map(|c| (0..dx).map(|t| x.at2(i, t) * w.at2(t, c)).sum()).collect())
        .collect())
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Compatibility matrix from the expanded definition, one pair at a time:
/// `[(q_i + b^Q_ij)·(k_j + b^K_ij) − b^Q_ij·b^K_ij] / √d_z`, the last term
/// only when `subtract_product` is set.
pub fn compat_expanded(x: &Tensor, d: &Tensor, w: &DasAttWeights) -> Result<Tensor> {
    let q = project_rows(x, &w.wq)?;
    let k = project_rows(x, &w.wk)?;
    let n = q.len();
    if d.shape() != [n, n] {
        return dim_err(format!("distance matrix {:?} does not match {n} instances", d.shape()));
    }
    let r = w.config.roles;
    let scale = (w.config.d_z as f64).sqrt();
    let mut e = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            let bq = w.bias(r.query, &w.uq, &w.vq, d.at2(i, j));
            let bk = w.bias(r.key, &w.uk, &w.vk, d.at2(i, j));
            let qi: Vec<f64> = q[i].iter().zip(&bq).map(|(a, b)| a + b).collect();
            let kj: Vec<f64> = k[j].iter().zip(&bk).map(|(a, b)| a + b).collect();
            let mut v = dot(&qi, &kj);
            if w.config.subtract_product {
                v -= dot(&bq, &bk);
            }
            e[i * n + j] = v / scale;
        }
    }
    Tensor::matrix(n, n, e)
}
