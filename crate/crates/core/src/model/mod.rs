//! The MIL scorer: CNN feature extractor, aggregator, max over instances and
//! a sigmoid output unit, plus the weighted binary cross-entropy loss.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attention::{
    abmil_pool, das_att, discrete_rel_sa, vanilla_sa, AbmilParams, DasAttConfig, DasAttParams, DiscreteRelConfig,
    DiscreteRelParams, SaProjections,
};
use crate::autodiff::{uniform_fan_in, ParamId, ParamStore, Tape, Tensor, Var};
use crate::dataset::Bag;
use crate::error::{dim_err, Error, Result};

/// Probabilities are clamped to `[BCE_EPS, 1 − BCE_EPS]` before the log.
pub const BCE_EPS: f64 = 1e-7;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Variant {
    /// No aggregation stage; max over the CNN embeddings.
    MaxPool,
    Abmil,
    VanillaSa,
    DiscreteRelSa,
    DasMil,
}

impl Variant {
    pub const ALL: [Variant; 5] = [Variant::MaxPool, Variant::Abmil, Variant::VanillaSa, Variant::DiscreteRelSa, Variant::DasMil];

    pub fn name(self) -> &'static str {
        match self {
            Variant::MaxPool => "max-pool",
            Variant::Abmil => "abmil",
            Variant::VanillaSa => "vanilla-sa",
            Variant::DiscreteRelSa => "discrete-rel-sa",
            Variant::DasMil => "das-mil",
        }
    }

    /// Whether the variant produces an instance-by-instance attention matrix.
    pub fn has_pairwise_attention(self) -> bool {
        matches!(self, Variant::VanillaSa | Variant::DiscreteRelSa | Variant::DasMil)
    }
}

impl std::fmt::Display for Variant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown variant {s:?}")))
    }
}

/// Two conv/relu/maxpool blocks and a fully connected layer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExtractorConfig {
    pub patch_side: usize,
    pub conv1_channels: usize,
    pub conv1_kernel: usize,
    pub conv2_channels: usize,
    pub conv2_kernel: usize,
    pub pool: usize,
    pub features: usize,
    pub dropout_conv: f64,
    pub dropout_fc: f64,
}

impl Default for ExtractorConfig {
    fn default() -> Self {
        Self {
            patch_side: 28,
            conv1_channels: 10,
            conv1_kernel: 5,
            conv2_channels: 20,
            conv2_kernel: 5,
            pool: 2,
            features: 32,
            dropout_conv: 0.1,
            dropout_fc: 0.5,
        }
    }
}

impl ExtractorConfig {
    /// 8×8 patches and 8 features, small enough for exhaustive gradient checks.
    pub fn reduced() -> Self {
        Self {
            patch_side: 8,
            conv1_channels: 3,
            conv1_kernel: 3,
            conv2_channels: 4,
            conv2_kernel: 2,
            pool: 2,
            features: 8,
            ..Self::default()
        }
    }

    /// Spatial side lengths after conv1, pool1, conv2, pool2.
    pub fn trace(&self) -> Result<[usize; 4]> {
        let conv = |s: usize, k: usize| if k >= 1 && s >= k { Ok(s - k + 1) } else { Err(()) };
        let pool = |s: usize| if self.pool >= 1 && s >= self.pool { Ok(s / self.pool) } else { Err(()) };
        let steps = (|| -> std::result::Result<[usize; 4], ()> {
            let a = conv(self.patch_side, self.conv1_kernel)?;
            let b = pool(a)?;
            let c = conv(b, self.conv2_kernel)?;
            Ok([a, b, c, pool(c)?])
        })();
        steps.map_err(|_| Error::Config(format!("extractor layers do not fit a {0}x{0} patch", self.patch_side)))
    }

    pub fn flat_len(&self) -> Result<usize> {
        let s = self.trace()?[3];
        Ok(self.conv2_channels * s * s)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExtractorParams {
    pub conv1_w: ParamId,
    pub conv1_b: ParamId,
    pub conv2_w: ParamId,
    pub conv2_b: ParamId,
    pub fc_w: ParamId,
    pub fc_b: ParamId,
    pub config: ExtractorConfig,
}

impl ExtractorParams {
    pub fn init<R: Rng + ?Sized>(store: &mut ParamStore, config: ExtractorConfig, rng: &mut R) -> Result<Self> {
        let flat = config.flat_len()?;
        let c = &config;
        let fan1 = c.conv1_kernel * c.conv1_kernel;
        let fan2 = c.conv1_channels * c.conv2_kernel * c.conv2_kernel;
        let conv1_w = store.add("cnn.conv1.w", uniform_fan_in(&[c.conv1_channels, 1, c.conv1_kernel, c.conv1_kernel], fan1, rng))?;
        let conv1_b = store.add("cnn.conv1.b", Tensor::zeros(&[c.conv1_channels]))?;
        let conv2_w = store.add(
            "cnn.conv2.w",
            uniform_fan_in(&[c.conv2_channels, c.conv1_channels, c.conv2_kernel, c.conv2_kernel], fan2, rng),
        )?;
        let conv2_b = store.add("cnn.conv2.b", Tensor::zeros(&[c.conv2_channels]))?;
        let fc_w = store.add("cnn.fc.w", uniform_fan_in(&[flat, c.features], flat, rng))?;
        let fc_b = store.add("cnn.fc.b", Tensor::zeros(&[c.features]))?;
        Ok(Self { conv1_w, conv1_b, conv2_w, conv2_b, fc_w, fc_b, config })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Per-patch embeddings `[n, features]` for patches `[n, 1, s, s]`.
pub fn extract_features<R: Rng + ?Sized>(
    tape: &mut Tape,
    store: &ParamStore,
    params: &ExtractorParams,
    patches: Var,
    mode: Mode,
    rng: &mut R,
) -> Result<Var> {
    let c = &params.config;
    let shape = tape.shape(patches).to_vec();
    if shape.len() != 4 || shape[1] != 1 || shape[2] != c.patch_side || shape[3] != c.patch_side {
        return dim_err(format!("patches must be [n, 1, {0}, {0}], got {shape:?}", c.patch_side));
    }
    let n = shape[0];
    let train = mode == Mode::Train;
    let [w1, b1, w2, b2, wf, bf] =
        [params.conv1_w, params.conv1_b, params.conv2_w, params.conv2_b, params.fc_w, params.fc_b]
            .map(|id| tape.param(store, id));

    let h = tape.conv2d(patches, w1, b1, 1)?;
    let h = tape.relu(h);
    let h = tape.maxpool2d(h, c.pool, c.pool)?;
    let h = tape.dropout(h, c.dropout_conv, train, rng)?;
    let h = tape.conv2d(h, w2, b2, 1)?;
    let h = tape.relu(h);
    let h = tape.maxpool2d(h, c.pool, c.pool)?;
    let h = tape.reshape(h, &[n, c.flat_len()?])?;
    let h = tape.dropout(h, c.dropout_fc, train, rng)?;
    let h = tape.matmul(h, wf)?;
    let h = tape.add_row(h, bf)?;
    Ok(tape.relu(h))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub variant: Variant,
    pub extractor: ExtractorConfig,
    /// `d_x` and `d_z` are taken from the extractor's feature count.
    pub das: DasAttConfig,
    pub discrete: DiscreteRelConfig,
    pub abmil_hidden: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            variant: Variant::DasMil,
            extractor: ExtractorConfig::default(),
            das: DasAttConfig::default(),
            discrete: DiscreteRelConfig::default(),
            abmil_hidden: 15,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Aggregator {
    MaxPool,
    Abmil(AbmilParams),
    VanillaSa(SaProjections),
    DiscreteRelSa(DiscreteRelParams),
    DasMil(DasAttParams),
}

#[derive(Clone, Debug, PartialEq)]
pub struct MilModel {
    pub config: ModelConfig,
    pub extractor: ExtractorParams,
    pub aggregator: Aggregator,
    pub scorer_w: ParamId,
    pub scorer_b: ParamId,
}

/// Score node and, when the variant has one, the attention node.
#[derive(Clone, Debug)]
pub struct ModelOutput {
    /// `[1, 1]` bag probability.
    pub score: Var,
    /// `[n, n]` for self-attention variants, `[1, n]` for attention pooling,
    /// rows and columns in canonical order.
    pub attention: Option<Var>,
    /// `order[k]` is the bag index of canonical instance `k`.
    pub order: Vec<usize>,
}

impl MilModel {
    /// Registers every parameter in `store` (which should be empty) in a
    /// fixed order: extractor, aggregator, scorer.
    pub fn init<R: Rng + ?Sized>(store: &mut ParamStore, config: ModelConfig, rng: &mut R) -> Result<Self> {
        let d = config.extractor.features;
        let extractor = ExtractorParams::init(store, config.extractor.clone(), rng)?;
        let aggregator = match config.variant {
            Variant::MaxPool => Aggregator::MaxPool,
            Variant::Abmil => Aggregator::Abmil(AbmilParams::init(store, "abmil", d, config.abmil_hidden, rng)?),
            Variant::VanillaSa => Aggregator::VanillaSa(SaProjections::init(store, "sa", d, d, rng)?),
            Variant::DiscreteRelSa => {
                let cfg = DiscreteRelConfig { d_x: d, d_z: d, ..config.discrete.clone() };
                Aggregator::DiscreteRelSa(DiscreteRelParams::init(store, "relsa", cfg, rng)?)
            }
            Variant::DasMil => {
                let cfg = DasAttConfig { d_x: d, d_z: d, ..config.das.clone() };
                Aggregator::DasMil(DasAttParams::init(store, "dasatt", cfg, rng)?)
            }
        };
        let scorer_w = store.add("scorer.w", uniform_fan_in(&[d, 1], d, rng))?;
        let scorer_b = store.add("scorer.b", Tensor::zeros(&[1]))?;
        Ok(Self { config, extractor, aggregator, scorer_w, scorer_b })
    }

    /// Builds a model for `config` and copies `values` into it. Every
    /// parameter must match by name and shape; trainability comes from the
    /// checkpoint.
    pub fn restore(config: ModelConfig, values: &ParamStore) -> Result<(Self, ParamStore)> {
        let mut store = ParamStore::new();
        let model = Self::init(&mut store, config, &mut ChaCha8Rng::seed_from_u64(0))?;
        if store.len() != values.len() {
            return Err(Error::CheckpointMismatch(format!(
                "model has {} parameters, checkpoint has {}",
                store.len(),
                values.len()
            )));
        }
        let ids: Vec<ParamId> = store.ids().collect();
        for id in ids {
            let name = store.get(id).name.clone();
            let src = values
                .id(&name)
                .map(|i| values.get(i))
                .ok_or_else(|| Error::CheckpointMismatch(format!("checkpoint lacks {name}")))?;
            if src.value.shape() != store.value(id).shape() {
                return Err(Error::CheckpointMismatch(format!(
                    "{name}: model shape {:?}, checkpoint shape {:?}",
                    store.value(id).shape(),
                    src.value.shape()
                )));
            }
            let dst = store.get_mut(id);
            dst.value = src.value.clone();
            dst.trainable = src.trainable;
        }
        Ok((model, store))
    }

    /// Full forward pass over one bag given as patches `[n, 1, s, s]` and
    /// pixel distances `[n, n]`.
    ///
    /// Instances are first put into a canonical order (by patch pixels, then
    /// by sorted distance row), so reordering a bag cannot change a single
    /// bit of the score. [`ModelOutput::order`] maps attention rows back.
    pub fn forward<R: Rng + ?Sized>(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        patches: &Tensor,
        distances: &Tensor,
        mode: Mode,
        rng: &mut R,
    ) -> Result<ModelOutput> {
        if patches.ndim() != 4 {
            return dim_err(format!("patches must be [n, 1, s, s], got {:?}", patches.shape()));
        }
        let n = patches.shape()[0];
        if distances.shape() != [n, n] {
            return dim_err(format!("distance matrix {:?} for {n} patches", distances.shape()));
        }
        let order = canonical_order(patches, distances);
        let (patches, distances) = reorder(patches, distances, &order);
        let x = tape.constant(patches);
        let z = extract_features(tape, store, &self.extractor, x, mode, rng)?;
        let (pooled, attention) = match &self.aggregator {
            Aggregator::MaxPool => (self.max_pool(tape, z)?, None),
            Aggregator::Abmil(p) => {
                let (pooled, alpha) = abmil_pool(tape, store, p, z)?;
                (pooled, Some(alpha))
            }
            Aggregator::VanillaSa(p) => {
                let out = vanilla_sa(tape, store, p, z)?;
                (self.max_pool(tape, out.z)?, Some(out.alpha))
            }
            Aggregator::DiscreteRelSa(p) => {
                let out = discrete_rel_sa(tape, store, p, z, &distances)?;
                (self.max_pool(tape, out.z)?, Some(out.alpha))
            }
            Aggregator::DasMil(p) => {
                let out = das_att(tape, store, p, z, &distances)?;
                (self.max_pool(tape, out.z)?, Some(out.alpha))
            }
        };
        let w = tape.param(store, self.scorer_w);
        let b = tape.param(store, self.scorer_b);
        let logit = tape.matmul(pooled, w)?;
        let logit = tape.add_row(logit, b)?;
        Ok(ModelOutput { score: tape.sigmoid(logit), attention, order })
    }

    fn max_pool(&self, tape: &mut Tape, z: Var) -> Result<Var> {
        let m = tape.max_over_rows(z)?;
        let d = tape.value(m).len();
        tape.reshape(m, &[1, d])
    }

    pub fn forward_bag<R: Rng + ?Sized>(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        bag: &Bag,
        mode: Mode,
        rng: &mut R,
    ) -> Result<ModelOutput> {
        if bag.is_empty() {
            return Err(Error::Precondition("cannot score an empty bag".into()));
        }
        self.forward(tape, store, &bag.patch_tensor()?, bag.distances().as_tensor(), mode, rng)
    }

    /// Eval-mode score and attention matrix for one bag.
    pub fn predict(&self, store: &ParamStore, bag: &Bag) -> Result<(f64, Option<Tensor>)> {
        let mut tape = Tape::new();
        let mut unused = ChaCha8Rng::seed_from_u64(0);
        let out = self.forward_bag(&mut tape, store, bag, Mode::Eval, &mut unused)?;
        let score = tape.value(out.score).item()?;
        let attention = out.attention.map(|a| restore_order(tape.value(a), &out.order));
        Ok((score, attention))
    }
}

fn canonical_order(patches: &Tensor, distances: &Tensor) -> Vec<usize> {
    let n = patches.shape()[0];
    let per = patches.len() / n;
    let sorted_rows: Vec<Vec<f64>> = (0..n)
        .map(|i| {
            let mut r = distances.row(i).to_vec();
            r.sort_by(f64::total_cmp);
            r
        })
        .collect();
    let lex = |a: &[f64], b: &[f64]| {
        a.iter().zip(b).map(|(x, y)| x.total_cmp(y)).find(|o| o.is_ne()).unwrap_or(std::cmp::Ordering::Equal)
    };
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| {
        let pi = &patches.data()[i * per..(i + 1) * per];
        let pj = &patches.data()[j * per..(j + 1) * per];
        lex(pi, pj).then_with(|| lex(&sorted_rows[i], &sorted_rows[j]))
    });
    order
}

fn reorder(patches: &Tensor, distances: &Tensor, order: &[usize]) -> (Tensor, Tensor) {
    let n = order.len();
    let per = patches.len() / n;
    let p: Vec<f64> = order.iter().flat_map(|&i| patches.data()[i * per..(i + 1) * per].iter().copied()).collect();
    let d: Vec<f64> = order.iter().flat_map(|&i| order.iter().map(move |&j| distances.at2(i, j))).collect();
    (Tensor::from_parts(patches.shape().to_vec(), p), Tensor::from_parts(vec![n, n], d))
}

/// Attention in canonical order back to bag order. Handles both `[n, n]`
/// and `[1, n]` matrices.
fn restore_order(alpha: &Tensor, order: &[usize]) -> Tensor {
    let (rows, cols) = alpha.dims2().expect("attention is a matrix");
    let mut pos = vec![0; order.len()];
    for (k, &i) in order.iter().enumerate() {
        pos[i] = k;
    }
    let row_of = |i: usize| if rows == 1 { 0 } else { pos[i] };
    let out_rows = if rows == 1 { 1 } else { cols };
    let data = (0..out_rows).flat_map(|i| (0..cols).map(move |j| (i, j))).map(|(i, j)| alpha.at2(row_of(i), pos[j])).collect();
    Tensor::from_parts(vec![out_rows, cols], data)
}

/// `−ω·y·log S − (1 − y)·log(1 − S)` on the tape, with `S` clamped.
pub fn weighted_bce(tape: &mut Tape, score: Var, label: u8, pos_weight: f64) -> Result<Var> {
    let s = tape.clamp(score, BCE_EPS, 1.0 - BCE_EPS);
    let loss = if label == 1 {
        let l = tape.log(s)?;
        tape.scale(l, -pos_weight)
    } else {
        let q = tape.one_minus(s);
        let l = tape.log(q)?;
        tape.scale(l, -1.0)
    };
    Ok(tape.sum(loss))
}

/// Plain-value counterpart of [`weighted_bce`].
pub fn bce_value(score: f64, label: u8, pos_weight: f64) -> f64 {
    let s = score.clamp(BCE_EPS, 1.0 - BCE_EPS);
    if label == 1 {
        -pos_weight * s.ln()
    } else {
        -(1.0 - s).ln()
    }
}

/// Ratio of negative to positive bags.
pub fn positive_weight(labels: impl IntoIterator<Item = u8>) -> Result<f64> {
    let (mut pos, mut neg) = (0usize, 0usize);
    for y in labels {
        if y == 1 {
            pos += 1;
        } else {
            neg += 1;
        }
    }
    if pos == 0 {
        return Err(Error::Precondition("training split has no positive bags".into()));
    }
    Ok(neg as f64 / pos as f64)
}

#[cfg(test)]
mod tests;
