//! Training loop, multi-seed runner, grid search and the embedding ablation.

use std::io::Write;
use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::attention::{PhiMode, Roles};
use crate::autodiff::{save_checkpoint, AdamW, AdamWConfig, ParamStore, Tape};
use crate::dataset::Bag;
use crate::error::{Error, Result};
use crate::metrics::{mean_std, EvalResult, MetricRecord};
use crate::model::{positive_weight, weighted_bce, MilModel, Mode, ModelConfig, Variant};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub seed: u64,
    /// Evaluate the test split after every epoch to find the best epoch.
    pub track_best_epoch: bool,
    /// Variant and, for DAS-MIL, the ablation switches.
    pub model: ModelConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self { epochs: 50, lr: 1e-3, weight_decay: 1e-2, seed: 0, track_best_epoch: true, model: ModelConfig::default() }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be at least 1".into()));
        }
        if !(self.lr >= 0.0) || !self.lr.is_finite() {
            return Err(Error::Config(format!("learning rate must be finite and >= 0, got {}", self.lr)));
        }
        if !(self.weight_decay >= 0.0) || !self.weight_decay.is_finite() {
            return Err(Error::Config(format!("weight decay must be finite and >= 0, got {}", self.weight_decay)));
        }
        Ok(())
    }

    pub fn adamw(&self) -> AdamWConfig {
        AdamWConfig { lr: self.lr, weight_decay: self.weight_decay, ..Default::default() }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub seed: u64,
    pub config: TrainConfig,
    /// Mean training loss of each epoch.
    pub epoch_loss: Vec<f64>,
    /// Test balanced accuracy after each epoch; empty unless tracked.
    pub epoch_test_balanced_accuracy: Vec<f64>,
    pub train: EvalResult,
    pub test: EvalResult,
    /// Zero-based epoch with the highest test balanced accuracy (earliest on
    /// ties) and its test metrics. Equals the final epoch when untracked.
    pub best_epoch: usize,
    pub best_test: EvalResult,
    pub wall_time_s: f64,
}

impl RunReport {
    pub fn records(&self) -> Vec<MetricRecord> {
        let variant = self.config.model.variant.name();
        let epochs = self.config.epochs;
        vec![
            MetricRecord::new(variant, self.seed, "train", &self.train, epochs, self.wall_time_s),
            MetricRecord::new(variant, self.seed, "test", &self.test, epochs, self.wall_time_s),
            MetricRecord::new(variant, self.seed, "test-best-epoch", &self.best_test, self.best_epoch + 1, self.wall_time_s),
        ]
    }
}

#[derive(Clone, Debug)]
pub struct TrainedRun {
    pub model: MilModel,
    pub store: ParamStore,
    pub report: RunReport,
}

impl TrainedRun {
    pub fn save_checkpoint(&self, path: &Path) -> Result<()> {
        save_checkpoint(path, &self.store, serde_json::to_value(&self.report.config)?, self.report.seed)
    }
}

const INIT_STREAM: u64 = 0;
const SHUFFLE_STREAM: u64 = 1 << 32;
const DROPOUT_STREAM: u64 = 2 << 32;

fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Order in which the training bags are visited in `epoch`.
pub fn epoch_order(seed: u64, epoch: usize, n: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut stream_rng(seed, SHUFFLE_STREAM | epoch as u64));
    order
}

/// Eval-mode scores for every bag, in bag order.
pub fn score_bags(model: &MilModel, store: &ParamStore, bags: &[Bag]) -> Result<Vec<f64>> {
    bags.par_iter().map(|b| model.predict(store, b).map(|(s, _)| s)).collect()
}

pub fn evaluate(model: &MilModel, store: &ParamStore, bags: &[Bag]) -> Result<EvalResult> {
    let labels: Vec<u8> = bags.iter().map(|b| b.label).collect();
    EvalResult::from_scores(score_bags(model, store, bags)?, &labels)
}

/// Trains one model with batch size one: each epoch visits the training
/// bags in a seeded order and takes one AdamW step per bag.
pub fn train_model(config: &TrainConfig, train: &[Bag], test: &[Bag]) -> Result<TrainedRun> {
    config.validate()?;
    if train.is_empty() || test.is_empty() {
        return Err(Error::Precondition("training and test splits must be non-empty".into()));
    }
    let start = Instant::now();
    let pos_weight = positive_weight(train.iter().map(|b| b.label))?;
    let mut store = ParamStore::new();
    let model = MilModel::init(&mut store, config.model.clone(), &mut stream_rng(config.seed, INIT_STREAM))?;
    let mut opt = AdamW::new(config.adamw(), &store)?;

    let mut epoch_loss = Vec::with_capacity(config.epochs);
    let mut epoch_test = Vec::new();
    let mut best: Option<(usize, EvalResult)> = None;
    for epoch in 0..config.epochs {
        let mut dropout = stream_rng(config.seed, DROPOUT_STREAM | epoch as u64);
        let mut total = 0.0;
        for idx in epoch_order(config.seed, epoch, train.len()) {
            let bag = &train[idx];
            let mut tape = Tape::new();
            let out = model.forward_bag(&mut tape, &store, bag, Mode::Train, &mut dropout)?;
            let score = tape.value(out.score).item()?;
            if !score.is_finite() {
                return Err(Error::NonFiniteLoss { epoch, bag: idx, loss: score });
            }
            let loss_var = weighted_bce(&mut tape, out.score, bag.label, pos_weight)?;
            let loss = tape.value(loss_var).item()?;
            if !loss.is_finite() {
                return Err(Error::NonFiniteLoss { epoch, bag: idx, loss });
            }
            total += loss;
            let grads = tape.backward(loss_var)?.for_params(&store);
            opt.step(&mut store, &grads)?;
        }
        epoch_loss.push(total / train.len() as f64);
        if config.track_best_epoch {
            let r = evaluate(&model, &store, test)?;
            epoch_test.push(r.balanced_accuracy);
            if best.as_ref().is_none_or(|(_, b)| r.balanced_accuracy > b.balanced_accuracy) {
                best = Some((epoch, r));
            }
        }
    }

    let train_eval = evaluate(&model, &store, train)?;
    let test_eval = evaluate(&model, &store, test)?;
    let (best_epoch, best_test) = best.unwrap_or_else(|| (config.epochs - 1, test_eval.clone()));
    let report = RunReport {
        seed: config.seed,
        config: config.clone(),
        epoch_loss,
        epoch_test_balanced_accuracy: epoch_test,
        train: train_eval,
        test: test_eval,
        best_epoch,
        best_test,
        wall_time_s: start.elapsed().as_secs_f64(),
    };
    Ok(TrainedRun { model, store, report })
}

/// Mean and sample standard deviation of a test metric over seeds.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
}

impl MeanStd {
    pub fn of(values: &[f64]) -> Result<Self> {
        let (mean, std) = mean_std(values)?;
        Ok(Self { mean, std })
    }
}

impl std::fmt::Display for MeanStd {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{:.3} ± {:.3}", self.mean, self.std)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeedSummary {
    pub seeds: Vec<u64>,
    pub test_balanced_accuracy: MeanStd,
    pub test_auroc: MeanStd,
    /// The same statistics at each run's best test epoch.
    pub best_epoch_balanced_accuracy: MeanStd,
    pub best_epoch_auroc: MeanStd,
    /// Highest single-run test balanced accuracy at the final epoch.
    pub best_single_run_balanced_accuracy: f64,
}

impl SeedSummary {
    pub fn of(reports: &[RunReport]) -> Result<Self> {
        let pick = |f: &dyn Fn(&RunReport) -> f64| -> Result<MeanStd> {
            MeanStd::of(&reports.iter().map(f).collect::<Vec<_>>())
        };
        Ok(Self {
            seeds: reports.iter().map(|r| r.seed).collect(),
            test_balanced_accuracy: pick(&|r| r.test.balanced_accuracy)?,
            test_auroc: pick(&|r| r.test.auroc)?,
            best_epoch_balanced_accuracy: pick(&|r| r.best_test.balanced_accuracy)?,
            best_epoch_auroc: pick(&|r| r.best_test.auroc)?,
            best_single_run_balanced_accuracy: reports
                .iter()
                .map(|r| r.test.balanced_accuracy)
                .fold(f64::NEG_INFINITY, f64::max),
        })
    }
}

#[derive(Clone, Debug)]
pub struct SeedRuns {
    pub runs: Vec<TrainedRun>,
    pub summary: SeedSummary,
}

impl SeedRuns {
    pub fn reports(&self) -> Vec<RunReport> {
        self.runs.iter().map(|r| r.report.clone()).collect()
    }
}

/// Trains `config` once per seed, in parallel.
pub fn run_seeds(config: &TrainConfig, train: &[Bag], test: &[Bag], seeds: &[u64]) -> Result<SeedRuns> {
    if seeds.len() < 2 {
        return Err(Error::Precondition(format!("need at least two seeds, got {}", seeds.len())));
    }
    let runs: Vec<TrainedRun> = seeds
        .par_iter()
        .map(|&seed| train_model(&TrainConfig { seed, ..config.clone() }, train, test))
        .collect::<Result<_>>()?;
    let summary = SeedSummary::of(&runs.iter().map(|r| r.report.clone()).collect::<Vec<_>>())?;
    Ok(SeedRuns { runs, summary })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GridSpec {
    pub lr: Vec<f64>,
    pub weight_decay: Vec<f64>,
    /// Model settings to cross with the optimiser grid; empty means the
    /// base config's model only.
    pub models: Vec<ModelConfig>,
}

impl Default for GridSpec {
    fn default() -> Self {
        Self { lr: vec![1e-4, 1e-3], weight_decay: vec![1e-3, 1e-2], models: Vec::new() }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridCell {
    pub config: TrainConfig,
    pub summary: SeedSummary,
    pub reports: Vec<RunReport>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridResult {
    pub cells: Vec<GridCell>,
    pub best: usize,
}

impl GridResult {
    pub fn best_cell(&self) -> &GridCell {
        &self.cells[self.best]
    }

    /// One test record per (cell, seed).
    pub fn rows(&self) -> Vec<MetricRecord> {
        self.cells
            .iter()
            .flat_map(|c| c.reports.iter().map(|r| r.records()[1].clone()))
            .collect()
    }
}

/// Exhaustive search by mean test balanced accuracy. Ties go to the lower
/// learning rate, then the lower weight decay, then the earlier model entry.
pub fn grid_search(base: &TrainConfig, grid: &GridSpec, train: &[Bag], test: &[Bag], seeds: &[u64]) -> Result<GridResult> {
    let models = if grid.models.is_empty() { vec![base.model.clone()] } else { grid.models.clone() };
    if grid.lr.is_empty() || grid.weight_decay.is_empty() {
        return Err(Error::Config("grid needs at least one learning rate and one weight decay".into()));
    }
    if seeds.len() < 2 {
        return Err(Error::Precondition(format!("need at least two seeds, got {}", seeds.len())));
    }
    let mut configs = Vec::new();
    for (mi, model) in models.iter().enumerate() {
        for &lr in &grid.lr {
            for &weight_decay in &grid.weight_decay {
                configs.push((mi, TrainConfig { lr, weight_decay, model: model.clone(), ..base.clone() }));
            }
        }
    }
    let jobs: Vec<(usize, u64)> = (0..configs.len()).flat_map(|c| seeds.iter().map(move |&s| (c, s))).collect();
    let reports: Vec<RunReport> = jobs
        .par_iter()
        .map(|&(c, seed)| train_model(&TrainConfig { seed, ..configs[c].1.clone() }, train, test).map(|r| r.report))
        .collect::<Result<_>>()?;

    let cells: Vec<GridCell> = configs
        .iter()
        .zip(reports.chunks(seeds.len()))
        .map(|((_, config), reports)| {
            Ok(GridCell { config: config.clone(), summary: SeedSummary::of(reports)?, reports: reports.to_vec() })
        })
        .collect::<Result<_>>()?;
    let key = |i: usize| {
        let c = &cells[i];
        (c.summary.test_balanced_accuracy.mean, c.config.lr, c.config.weight_decay, configs[i].0)
    };
    let best = (1..cells.len()).fold(0, |best, i| {
        let (a, b) = (key(best), key(i));
        let better = b.0 > a.0 || (b.0 == a.0 && (b.1, b.2, b.3).partial_cmp(&(a.1, a.2, a.3)).is_some_and(|o| o.is_lt()));
        if better {
            i
        } else {
            best
        }
    });
    Ok(GridResult { cells, best })
}

/// One configuration of the embedding ablation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationSetting {
    pub name: String,
    pub roles: Roles,
    pub subtract_product: bool,
    pub freeze_embeddings: bool,
    pub phi: PhiMode,
}

impl AblationSetting {
    pub fn apply(&self, base: &ModelConfig) -> ModelConfig {
        let mut m = base.clone();
        m.variant = Variant::DasMil;
        m.das.roles = self.roles;
        m.das.subtract_product = self.subtract_product;
        m.das.freeze_embeddings = self.freeze_embeddings;
        m.das.phi = self.phi;
        m
    }
}

/// The eleven ablation rows: single roles, role pairs, the full triple
/// with and without the subtracted product, frozen embeddings and the
/// identity φ.
pub fn ablation_settings() -> Vec<AblationSetting> {
    let roles = |key, query, value| Roles { key, query, value };
    let row = |name: &str, r: Roles, subtract_product: bool, freeze_embeddings: bool, phi: PhiMode| AblationSetting {
        name: name.to_string(),
        roles: r,
        subtract_product,
        freeze_embeddings,
        phi,
    };
    let s = PhiMode::Sigmoid;
    vec![
        row("K", roles(true, false, false), true, false, s),
        row("Q", roles(false, true, false), true, false, s),
        row("V", roles(false, false, true), true, false, s),
        row("K,Q", roles(true, true, false), true, false, s),
        row("K,Q +product", roles(true, true, false), false, false, s),
        row("K,V", roles(true, false, true), true, false, s),
        row("Q,V", roles(false, true, true), true, false, s),
        row("K,Q,V", Roles::ALL, true, false, s),
        row("K,Q,V +product", Roles::ALL, false, false, s),
        row("K,Q,V frozen", Roles::ALL, true, true, s),
        row("K,Q,V identity-phi", Roles::ALL, true, false, PhiMode::Identity),
    ]
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub setting: AblationSetting,
    pub summary: SeedSummary,
    pub records: Vec<MetricRecord>,
}

/// Trains `settings` (usually [`ablation_settings`]) on top of `base`.
pub fn run_ablation(
    base: &TrainConfig,
    settings: &[AblationSetting],
    train: &[Bag],
    test: &[Bag],
    seeds: &[u64],
) -> Result<Vec<AblationRow>> {
    settings
        .iter()
        .map(|s| {
            let config = TrainConfig { model: s.apply(&base.model), ..base.clone() };
            let runs = run_seeds(&config, train, test, seeds)?;
            let records = runs.runs.iter().map(|r| r.report.records()[1].clone()).collect();
            Ok(AblationRow { setting: s.clone(), summary: runs.summary, records })
        })
        .collect()
}

/// Aligned text rendering of an ablation table.
pub fn ablation_table(rows: &[AblationRow]) -> String {
    let width = rows.iter().map(|r| r.setting.name.len()).max().unwrap_or(0).max(13);
    let mut out = format!("{:<width$}  {:>15}  {:>15}\n", "configuration", "balanced acc.", "AUROC");
    for r in rows {
        out += &format!(
            "{:<width$}  {:>15}  {:>15}\n",
            r.setting.name,
            r.summary.test_balanced_accuracy.to_string(),
            r.summary.test_auroc.to_string()
        );
    }
    out
}

/// Writes one JSON document per line.
pub fn write_jsonl<T: Serialize>(path: &Path, items: &[T]) -> Result<()> {
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    for item in items {
        serde_json::to_writer(&mut w, item)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}
