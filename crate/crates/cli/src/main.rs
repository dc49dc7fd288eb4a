//! `dasmil`: generate MNIST collages, train and evaluate MIL models, run the
//! embedding ablation and export attention maps.

mod config;

use std::io::ErrorKind;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};
use serde_json::json;

use dasmil::attention::{attention_csv, attention_pgm};
use dasmil::autodiff::load_checkpoint;
use dasmil::dataset::{generate_dataset, load_mnist_dir, read_bags, write_bags, Bag, DatasetConfig};
use dasmil::metrics::MetricRecord;
use dasmil::model::{MilModel, Variant};
use dasmil::train::{
    ablation_settings, ablation_table, evaluate, grid_search, run_ablation, run_seeds, train_model, write_jsonl, GridSpec,
    SeedSummary, TrainConfig, TrainedRun,
};
use dasmil::Error;

/// Process exit status with a message for stderr.
#[derive(Debug)]
pub struct Failure {
    code: u8,
    message: String,
}

impl Failure {
    const USAGE: u8 = 1;
    const INPUT_MISSING: u8 = 2;
    const DATA_CORRUPT: u8 = 3;
    const CHECKPOINT: u8 = 4;
    const UNSUPPORTED: u8 = 5;

    fn new(code: u8, message: impl Into<String>) -> Self {
        Self { code, message: message.into() }
    }

    pub fn usage(message: impl Into<String>) -> Self {
        Self::new(Self::USAGE, message)
    }

    pub fn input(message: impl Into<String>) -> Self {
        Self::new(Self::INPUT_MISSING, message)
    }

    /// Error while reading a data input: missing files are exit 2, anything
    /// unreadable is exit 3.
    fn data(what: &Path, e: Error) -> Self {
        match &e {
            Error::Io(io) if io.kind() == ErrorKind::NotFound => Self::input(format!("{}: {e}", what.display())),
            Error::Io(_) => Self::new(Self::USAGE, format!("{}: {e}", what.display())),
            _ => Self::new(Self::DATA_CORRUPT, format!("{}: {e}", what.display())),
        }
    }

    fn checkpoint(what: &Path, e: impl std::fmt::Display) -> Self {
        Self::new(Self::CHECKPOINT, format!("{}: {e}", what.display()))
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match e {
            Error::CheckpointMismatch(_) => Self::CHECKPOINT,
            Error::Format { .. } | Error::Checksum { .. } => Self::DATA_CORRUPT,
            _ => Self::USAGE,
        };
        Self::new(code, e.to_string())
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Self::usage(e.to_string())
    }
}

impl From<serde_json::Error> for Failure {
    fn from(e: serde_json::Error) -> Self {
        Self::usage(e.to_string())
    }
}

type Outcome = Result<(), Failure>;

#[derive(Parser)]
#[command(name = "dasmil", version, about = "Distance-aware self-attention for multiple instance learning")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args)]
struct ConfigArgs {
    /// JSON config file; fields left out keep their defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override a config field, e.g. `--set lr=1e-4` or
    /// `--set model.das.subtract_product=false`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Build train/test collage bags from MNIST IDX files.
    GenData {
        #[arg(long)]
        mnist_dir: PathBuf,
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Positive bags have their key pair farther apart than the threshold.
        #[arg(long)]
        inverted: bool,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train one model per seed; writes reports, metrics and checkpoints.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        variant: Option<Variant>,
        #[arg(long, value_delimiter = ',', default_value = "0,1,2,3,4")]
        seeds: Vec<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Eval-mode metrics of a checkpoint on both splits, printed as JSON.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
    },
    /// Train every embedding ablation setting.
    Ablate {
        #[arg(long)]
        data: PathBuf,
        /// Optional second dataset (usually the inverted collage).
        #[arg(long)]
        inv_data: Option<PathBuf>,
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long, value_delimiter = ',', default_value = "0,1,2,3,4")]
        seeds: Vec<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write the attention matrix of one bag as CSV or PGM.
    ExportAttention {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_enum, default_value_t = SplitArg::Test)]
        split: SplitArg,
        #[arg(long)]
        bag_index: usize,
        #[arg(long, value_enum, default_value_t = Format::Csv)]
        format: Format,
        #[arg(long)]
        out: PathBuf,
    },
    /// Exhaustive learning-rate / weight-decay search.
    Grid {
        #[arg(long)]
        data: PathBuf,
        /// JSON grid (`lr`, `weight_decay`, `models`); defaults if omitted.
        #[arg(long)]
        grid: Option<PathBuf>,
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long, value_delimiter = ',', default_value = "0,1,2,3,4")]
        seeds: Vec<u64>,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum SplitArg {
    Train,
    Test,
}

#[derive(Clone, Copy, ValueEnum)]
enum Format {
    Csv,
    Pgm,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { Failure::USAGE } else { 0 });
        }
    };
    if let Err(f) = configure_threads() {
        eprintln!("error: {}", f.message);
        return ExitCode::from(f.code);
    }
    let result = match cli.command {
        Command::GenData { mnist_dir, cfg, inverted, out } => gen_data(&mnist_dir, &cfg, inverted, &out),
        Command::Train { data, cfg, variant, seeds, out } => train(&data, &cfg, variant, &seeds, &out),
        Command::Eval { checkpoint, data } => eval(&checkpoint, &data),
        Command::Ablate { data, inv_data, cfg, seeds, out } => ablate(&data, inv_data.as_deref(), &cfg, &seeds, &out),
        Command::ExportAttention { checkpoint, data, split, bag_index, format, out } => {
            export_attention(&checkpoint, &data, split, bag_index, format, &out)
        }
        Command::Grid { data, grid, cfg, seeds, out } => grid_cmd(&data, grid.as_deref(), &cfg, &seeds, &out),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}

/// `DASMIL_THREADS` caps the worker pool.
fn configure_threads() -> Outcome {
    let Ok(raw) = std::env::var("DASMIL_THREADS") else { return Ok(()) };
    let n: usize = raw
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| Failure::usage(format!("DASMIL_THREADS must be a positive integer, got `{raw}`")))?;
    rayon::ThreadPoolBuilder::new().num_threads(n).build_global().map_err(|e| Failure::usage(e.to_string()))
}

#[derive(Serialize, Deserialize)]
struct SplitManifest {
    file: String,
    bags: usize,
    positive: usize,
    positive_fraction: f64,
    crc32: String,
}

#[derive(Serialize, Deserialize)]
struct DataManifest {
    variant: String,
    config: DatasetConfig,
    train: SplitManifest,
    test: SplitManifest,
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Outcome {
    std::fs::write(path, serde_json::to_string_pretty(value)? + "\n")?;
    Ok(())
}

fn gen_data(mnist_dir: &Path, cfg: &ConfigArgs, inverted: bool, out: &Path) -> Outcome {
    let mut config: DatasetConfig = config::load(cfg.config.as_deref(), &cfg.overrides)?;
    config.inverted |= inverted;
    let (train_pool, test_pool) = load_mnist_dir(mnist_dir).map_err(|e| Failure::data(mnist_dir, e))?;
    let (train, test) = generate_dataset(&config, &train_pool, &test_pool)?;
    std::fs::create_dir_all(out)?;
    let split = |name: &str, bags: &[Bag]| -> Result<SplitManifest, Failure> {
        let file = format!("{name}.bags");
        let crc = write_bags(&out.join(&file), bags, Some(&config))?;
        let positive = bags.iter().filter(|b| b.label == 1).count();
        Ok(SplitManifest {
            file,
            bags: bags.len(),
            positive,
            positive_fraction: positive as f64 / bags.len().max(1) as f64,
            crc32: format!("{crc:08x}"),
        })
    };
    let manifest = DataManifest {
        variant: config.variant().to_string(),
        train: split("train", &train)?,
        test: split("test", &test)?,
        config,
    };
    write_json(&out.join("manifest.json"), &manifest)?;
    println!(
        "{} bags: train {} ({:.0}% positive, crc {}), test {} ({:.0}% positive, crc {})",
        manifest.variant,
        manifest.train.bags,
        100.0 * manifest.train.positive_fraction,
        manifest.train.crc32,
        manifest.test.bags,
        100.0 * manifest.test.positive_fraction,
        manifest.test.crc32
    );
    Ok(())
}

fn load_split(dir: &Path, name: &str) -> Result<Vec<Bag>, Failure> {
    let path = dir.join(format!("{name}.bags"));
    read_bags(&path).map(|(_, bags)| bags).map_err(|e| Failure::data(&path, e))
}

fn load_data(dir: &Path) -> Result<(Vec<Bag>, Vec<Bag>), Failure> {
    Ok((load_split(dir, "train")?, load_split(dir, "test")?))
}

fn train_config(cfg: &ConfigArgs, variant: Option<Variant>) -> Result<TrainConfig, Failure> {
    let mut config: TrainConfig = config::load(cfg.config.as_deref(), &cfg.overrides)?;
    if let Some(v) = variant {
        config.model.variant = v;
    }
    config.validate()?;
    Ok(config)
}

fn check_seeds(seeds: &[u64]) -> Outcome {
    let mut sorted = seeds.to_vec();
    sorted.sort_unstable();
    sorted.dedup();
    if seeds.is_empty() || sorted.len() != seeds.len() {
        return Err(Failure::usage(format!("seeds must be non-empty and distinct, got {seeds:?}")));
    }
    Ok(())
}

fn train(data: &Path, cfg: &ConfigArgs, variant: Option<Variant>, seeds: &[u64], out: &Path) -> Outcome {
    check_seeds(seeds)?;
    let config = train_config(cfg, variant)?;
    let (train, test) = load_data(data)?;
    let (runs, summary): (Vec<TrainedRun>, Option<SeedSummary>) = if seeds.len() == 1 {
        (vec![train_model(&TrainConfig { seed: seeds[0], ..config.clone() }, &train, &test)?], None)
    } else {
        let r = run_seeds(&config, &train, &test, seeds)?;
        (r.runs, Some(r.summary))
    };

    let ckpt_dir = out.join("checkpoints");
    std::fs::create_dir_all(&ckpt_dir)?;
    for run in &runs {
        run.save_checkpoint(&ckpt_dir.join(format!("seed-{}.ckpt", run.report.seed)))?;
    }
    let reports: Vec<_> = runs.iter().map(|r| r.report.clone()).collect();
    write_jsonl(&out.join("reports.jsonl"), &reports)?;
    let records: Vec<MetricRecord> = reports.iter().flat_map(|r| r.records()).collect();
    write_jsonl(&out.join("metrics.jsonl"), &records)?;
    write_json(&out.join("config.json"), &json!({ "data": data, "seeds": seeds, "train": config }))?;
    if let Some(s) = &summary {
        write_json(&out.join("summary.json"), s)?;
    }

    let name = config.model.variant.name();
    for r in &reports {
        println!(
            "{name} seed {}: test balanced accuracy {:.3}, AUROC {:.3} (best epoch {}: {:.3})",
            r.seed,
            r.test.balanced_accuracy,
            r.test.auroc,
            r.best_epoch + 1,
            r.best_test.balanced_accuracy
        );
    }
    if let Some(s) = summary {
        println!("{name}: balanced accuracy {}, AUROC {}", s.test_balanced_accuracy, s.test_auroc);
    }
    Ok(())
}

fn restore(checkpoint: &Path) -> Result<(MilModel, dasmil::autodiff::ParamStore, TrainConfig, u64), Failure> {
    let (header, values) = load_checkpoint(checkpoint).map_err(|e| Failure::checkpoint(checkpoint, e))?;
    let config: TrainConfig =
        serde_json::from_value(header.hyperparameters).map_err(|e| Failure::checkpoint(checkpoint, e))?;
    let (model, store) =
        MilModel::restore(config.model.clone(), &values).map_err(|e| Failure::checkpoint(checkpoint, e))?;
    Ok((model, store, config, header.seed))
}

fn eval(checkpoint: &Path, data: &Path) -> Outcome {
    let (model, store, config, seed) = restore(checkpoint)?;
    let (train, test) = load_data(data)?;
    let check = |bags: &[Bag]| -> Outcome {
        let side = config.model.extractor.patch_side;
        match bags.iter().flat_map(|b| &b.instances).find(|i| i.patch.len() != side * side) {
            Some(i) => Err(Failure::checkpoint(
                checkpoint,
                format!("model expects {side}x{side} patches, data has {} pixels", i.patch.len()),
            )),
            None => Ok(()),
        }
    };
    check(&train)?;
    check(&test)?;
    let variant = config.model.variant.name();
    // Nothing is trained here, so the timing field is zero.
    let record = |split: &str, bags: &[Bag]| -> Result<MetricRecord, Failure> {
        Ok(MetricRecord::new(variant, seed, split, &evaluate(&model, &store, bags)?, config.epochs, 0.0))
    };
    let out = json!({ "train": record("train", &train)?, "test": record("test", &test)? });
    println!("{}", serde_json::to_string_pretty(&out)?);
    Ok(())
}

fn export_attention(checkpoint: &Path, data: &Path, split: SplitArg, index: usize, format: Format, out: &Path) -> Outcome {
    let (model, store, config, _) = restore(checkpoint)?;
    if config.model.variant == Variant::MaxPool {
        return Err(Failure::new(Failure::UNSUPPORTED, "max-pool has no attention weights to export"));
    }
    let name = match split {
        SplitArg::Train => "train",
        SplitArg::Test => "test",
    };
    let bags = load_split(data, name)?;
    let bag = bags
        .get(index)
        .ok_or_else(|| Failure::usage(format!("bag index {index} out of range ({} bags in {name})", bags.len())))?;
    let (score, alpha) = model.predict(&store, bag)?;
    let alpha = alpha.ok_or_else(|| Failure::new(Failure::UNSUPPORTED, "model returned no attention"))?;
    match format {
        Format::Csv => std::fs::write(out, attention_csv(&alpha)?)?,
        Format::Pgm => std::fs::write(out, attention_pgm(&alpha)?)?,
    }
    let shape = alpha.shape();
    println!(
        "{name} bag {index}: label {}, score {score:.4}, {}x{} attention written to {}",
        bag.label,
        shape[0],
        shape[1],
        out.display()
    );
    Ok(())
}

fn ablate(data: &Path, inv_data: Option<&Path>, cfg: &ConfigArgs, seeds: &[u64], out: &Path) -> Outcome {
    check_seeds(seeds)?;
    if seeds.len() < 2 {
        return Err(Failure::usage("the ablation needs at least two seeds"));
    }
    let base = train_config(cfg, Some(Variant::DasMil))?;
    let settings = ablation_settings();
    let mut datasets = vec![("std", data)];
    if let Some(inv) = inv_data {
        datasets.push(("inv", inv));
    }
    std::fs::create_dir_all(out)?;
    let mut columns = Vec::new();
    let mut text = String::new();
    let mut records = Vec::new();
    for (tag, dir) in datasets {
        let (train, test) = load_data(dir)?;
        let rows = run_ablation(&base, &settings, &train, &test, seeds)?;
        text += &format!("[{tag}] {}\n{}\n", dir.display(), ablation_table(&rows));
        records.extend(rows.iter().flat_map(|r| {
            r.records.iter().map(move |m| json!({ "dataset": tag, "setting": r.setting.name, "record": m }))
        }));
        columns.push((tag, rows));
    }
    let table: Vec<_> = settings
        .iter()
        .enumerate()
        .map(|(i, s)| {
            let mut row = json!({ "setting": s });
            for (tag, rows) in &columns {
                row[*tag] = serde_json::to_value(&rows[i].summary).expect("summary serializes");
            }
            row
        })
        .collect();
    write_json(&out.join("ablation.json"), &json!({ "seeds": seeds, "base": base, "rows": table }))?;
    write_jsonl(&out.join("ablation.jsonl"), &records)?;
    std::fs::write(out.join("ablation.txt"), &text)?;
    print!("{text}");
    Ok(())
}

fn grid_cmd(data: &Path, grid: Option<&Path>, cfg: &ConfigArgs, seeds: &[u64], out: &Path) -> Outcome {
    check_seeds(seeds)?;
    if seeds.len() < 2 {
        return Err(Failure::usage("the grid search needs at least two seeds"));
    }
    let base = train_config(cfg, None)?;
    let spec: GridSpec = config::load(grid, &[])?;
    let (train, test) = load_data(data)?;
    let result = grid_search(&base, &spec, &train, &test, seeds)?;
    std::fs::create_dir_all(out)?;
    write_json(&out.join("grid.json"), &result)?;
    write_jsonl(&out.join("grid.jsonl"), &result.rows())?;
    write_json(&out.join("best_config.json"), &result.best_cell().config)?;
    for (i, c) in result.cells.iter().enumerate() {
        println!(
            "{} lr {:e} wd {:e} {}: balanced accuracy {}",
            if i == result.best { "*" } else { " " },
            c.config.lr,
            c.config.weight_decay,
            c.config.model.variant,
            c.summary.test_balanced_accuracy
        );
    }
    Ok(())
}
