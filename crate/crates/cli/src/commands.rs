//! Subcommand implementations. Each command resolves its settings from
//! flags first and the optional config file second, validates them against
//! the owning module's preconditions, and only then touches the
//! filesystem. All outputs land in the paths the user named.

use std::path::{Path, PathBuf};

use clap::Args;

use sigat::cache::cache_graph;
use sigat::graph::NodeScheme;
use sigat::image::SonarImage;
use sigat::manifest::{DatasetManifest, Split};
use sigat::model::{
    build_model, evaluate, gradcheck_fixture, model_grad_check, train as train_loop, Metrics,
    ModelConfig, SigatModel, TrainConfig,
};
use sigat::pipeline::{build_graph as assemble_graph, load_split};
use sigat::synth::{write_dataset, SyntheticConfig};
use sigat::{Error, Result};

use crate::conf::{self, FileConfig, GridSpec};

const DEFAULT_GRID: GridSpec = GridSpec { cols: 10, rows: 10 };
const GRAD_THRESHOLD: f64 = 1e-4;

fn check_gamma(gamma: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&gamma) {
        return Err(Error::InvalidConfig(format!(
            "gamma must lie in [0, 1], got {gamma}"
        )));
    }
    Ok(())
}

fn check_k(k: usize) -> Result<()> {
    if k == 0 {
        return Err(Error::InvalidConfig("k must be at least 1".into()));
    }
    Ok(())
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::Io {
        context: format!("writing {}", path.display()),
        source: e,
    })
}

fn ensure_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::Io {
        context: format!("creating {}", dir.display()),
        source: e,
    })
}

#[derive(Args)]
pub struct BuildGraphArgs {
    /// Input image (.pgm or .png).
    #[arg(long, value_name = "FILE")]
    pub image: PathBuf,
    /// Output graph cache file.
    #[arg(long, value_name = "FILE")]
    pub out: PathBuf,
    /// Affinity mix: 1.0 weighs coordinates only, 0.0 intensities only.
    #[arg(long)]
    pub gamma: Option<f64>,
    /// Neighbors kept per node.
    #[arg(long)]
    pub k: Option<usize>,
    /// Patch grid as COLSxROWS.
    #[arg(long)]
    pub grid: Option<GridSpec>,
}

pub fn build_graph(args: BuildGraphArgs, conf: &FileConfig) -> Result<()> {
    let gamma = conf::resolve(args.gamma, conf, "gamma", 0.5)?;
    let k = conf::resolve(args.k, conf, "k", 8)?;
    let grid = conf::resolve(args.grid, conf, "grid", DEFAULT_GRID)?;
    check_gamma(gamma)?;
    check_k(k)?;
    let image = SonarImage::read_auto(&args.image)?;
    let scheme = NodeScheme::Grid {
        cols: grid.cols,
        rows: grid.rows,
    };
    let (nodes, graph) = assemble_graph(&image, &scheme, gamma, k)?;
    cache_graph(&nodes, &graph, &args.out)?;
    println!("nodes {}", graph.n());
    println!("k {}", graph.k());
    println!("row_density {:.4}", graph.row_density());
    println!("cache {}", args.out.display());
    Ok(())
}

#[derive(Args)]
pub struct SynthArgs {
    /// Output dataset directory.
    #[arg(long, value_name = "DIR")]
    pub out: PathBuf,
    /// Images per class: one count for all classes, or one per class.
    #[arg(long)]
    pub per_class: Option<String>,
    /// Image width in pixels.
    #[arg(long)]
    pub width: Option<usize>,
    /// Image height in pixels.
    #[arg(long)]
    pub height: Option<usize>,
    /// Train/val/test ratios as R,R,R.
    #[arg(long)]
    pub ratios: Option<String>,
    /// Image-content seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Split-assignment seed.
    #[arg(long)]
    pub split_seed: Option<u64>,
}

pub fn synth(args: SynthArgs, conf: &FileConfig) -> Result<()> {
    let mut config = SyntheticConfig::default();
    let per_raw = conf::resolve(args.per_class, conf, "per_class", "40".to_string())?;
    config.per_class =
        conf::parse_per_class(&per_raw, config.classes.len()).map_err(Error::InvalidConfig)?;
    config.width = conf::resolve(args.width, conf, "width", config.width)?;
    config.height = conf::resolve(args.height, conf, "height", config.height)?;
    let ratios_raw = conf::resolve(args.ratios, conf, "ratios", "0.7,0.1,0.2".to_string())?;
    let ratios = conf::parse_ratios(&ratios_raw).map_err(Error::InvalidConfig)?;
    let seed = conf::resolve(args.seed, conf, "seed", 0u64)?;
    let split_seed = conf::resolve(args.split_seed, conf, "split_seed", 1u64)?;
    config.validate()?;
    let manifest = write_dataset(&config, seed, &args.out, ratios, split_seed)?;
    let (tr, va, te) = manifest.split_counts();
    println!("images {}", manifest.entries.len());
    println!("train {tr} val {va} test {te}");
    println!("manifest {}", args.out.join("manifest.csv").display());
    Ok(())
}

#[derive(Args)]
pub struct TrainArgs {
    /// Dataset directory containing manifest.csv.
    #[arg(long, value_name = "DIR")]
    pub data: PathBuf,
    /// Output directory for the checkpoint and metrics CSV.
    #[arg(long, value_name = "DIR")]
    pub out: PathBuf,
    /// Affinity mix for graph construction.
    #[arg(long)]
    pub gamma: Option<f64>,
    /// Neighbors kept per node.
    #[arg(long)]
    pub k: Option<usize>,
    /// Patch grid as COLSxROWS.
    #[arg(long)]
    pub grid: Option<GridSpec>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    /// Initial learning rate.
    #[arg(long)]
    pub lr0: Option<f64>,
    /// Multiplier applied every decay interval.
    #[arg(long)]
    pub lr_decay: Option<f64>,
    /// Decay interval in epochs.
    #[arg(long)]
    pub decay_every: Option<usize>,
    /// sgd or adam.
    #[arg(long)]
    pub optimizer: Option<String>,
    /// Batch-shuffle seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Parameter-initialization seed.
    #[arg(long)]
    pub model_seed: Option<u64>,
}

pub fn train(args: TrainArgs, conf: &FileConfig) -> Result<()> {
    let gamma = conf::resolve(args.gamma, conf, "gamma", 0.5)?;
    let k = conf::resolve(args.k, conf, "k", 8)?;
    let grid = conf::resolve(args.grid, conf, "grid", DEFAULT_GRID)?;
    check_gamma(gamma)?;
    check_k(k)?;
    let defaults = TrainConfig::default();
    let optimizer_raw = conf::resolve(args.optimizer, conf, "optimizer", "adam".to_string())?;
    let train_config = TrainConfig {
        epochs: conf::resolve(args.epochs, conf, "epochs", defaults.epochs)?,
        batch_size: conf::resolve(args.batch_size, conf, "batch_size", defaults.batch_size)?,
        lr0: conf::resolve(args.lr0, conf, "lr0", defaults.lr0)?,
        lr_decay: conf::resolve(args.lr_decay, conf, "lr_decay", defaults.lr_decay)?,
        decay_every: conf::resolve(args.decay_every, conf, "decay_every", defaults.decay_every)?,
        optimizer: conf::parse_optimizer(&optimizer_raw).map_err(Error::InvalidConfig)?,
        seed: conf::resolve(args.seed, conf, "seed", defaults.seed)?,
    };
    train_config.validate()?;
    let model_seed = conf::resolve(args.model_seed, conf, "model_seed", 42u64)?;

    let manifest = DatasetManifest::read_csv(&args.data.join("manifest.csv"))?;
    let mut model_config = ModelConfig::default_plan(manifest.class_names.clone());
    model_config.gamma = gamma;
    model_config.k = k;
    model_config.seed = model_seed;
    model_config.validate()?;
    println!("parameters {}", model_config.param_count());

    let scheme = NodeScheme::Grid {
        cols: grid.cols,
        rows: grid.rows,
    };
    let train_set = load_split(&args.data, &manifest, Split::Train, &scheme, gamma, k)?;
    let val_set = load_split(&args.data, &manifest, Split::Val, &scheme, gamma, k)?;
    println!("graphs train {} val {}", train_set.len(), val_set.len());

    let mut model = build_model(model_config)?;
    let outcome = train_loop(&mut model, &train_set, &val_set, &train_config, |row| {
        println!(
            "epoch {} train_loss {:.6} val_loss {:.6} val_acc {:.4}",
            row.epoch, row.train_loss, row.val_loss, row.val_acc
        );
    })?;

    ensure_dir(&args.out)?;
    let ckpt = args.out.join("model.json");
    let metrics_path = args.out.join("metrics.csv");
    model.save(&ckpt)?;
    outcome.metrics.write_csv(&metrics_path)?;
    println!("best_epoch {}", outcome.best_epoch);
    println!("checkpoint {}", ckpt.display());
    println!("metrics {}", metrics_path.display());
    Ok(())
}

#[derive(Args)]
pub struct EvalArgs {
    /// Dataset directory containing manifest.csv.
    #[arg(long, value_name = "DIR")]
    pub data: PathBuf,
    /// Checkpoint written by train.
    #[arg(long, value_name = "FILE")]
    pub checkpoint: PathBuf,
    /// Split to evaluate: train, val, or test.
    #[arg(long, default_value = "test")]
    pub split: String,
    /// Output directory for the confusion matrix CSV.
    #[arg(long, value_name = "DIR")]
    pub out: PathBuf,
    /// Patch grid as COLSxROWS; gamma and k come from the checkpoint.
    #[arg(long)]
    pub grid: Option<GridSpec>,
}

pub fn eval(args: EvalArgs, conf: &FileConfig) -> Result<()> {
    let split: Split = args.split.parse()?;
    let grid = conf::resolve(args.grid, conf, "grid", DEFAULT_GRID)?;
    let model = SigatModel::load(&args.checkpoint)?;
    let gamma = model.config().gamma;
    let k = model.config().k;
    let manifest = DatasetManifest::read_csv(&args.data.join("manifest.csv"))?;
    if manifest.class_names != model.config().class_names {
        return Err(Error::InvalidConfig(format!(
            "dataset classes {:?} do not match checkpoint classes {:?}",
            manifest.class_names,
            model.config().class_names
        )));
    }
    let scheme = NodeScheme::Grid {
        cols: grid.cols,
        rows: grid.rows,
    };
    let samples = load_split(&args.data, &manifest, split, &scheme, gamma, k)?;
    let report = evaluate(&model, &samples)?;
    println!("split {split} graphs {}", samples.len());
    println!("accuracy {:.4}", report.accuracy);
    println!("mean_loss {:.6}", report.mean_loss);
    ensure_dir(&args.out)?;
    let path = args.out.join("confusion.csv");
    write_confusion(&path, &manifest.class_names, &report.confusion)?;
    println!("confusion {}", path.display());
    Ok(())
}

/// `true_class,pred_<a>,pred_<b>,...` with one row per true class.
fn write_confusion(path: &Path, names: &[String], confusion: &[Vec<usize>]) -> Result<()> {
    let mut out = String::from("true_class");
    for n in names {
        out.push_str(&format!(",pred_{n}"));
    }
    out.push('\n');
    for (name, row) in names.iter().zip(confusion) {
        out.push_str(name);
        for v in row {
            out.push_str(&format!(",{v}"));
        }
        out.push('\n');
    }
    write_text(path, &out)
}

#[derive(Args)]
pub struct GradcheckArgs {
    /// Central finite-difference step.
    #[arg(long)]
    pub epsilon: Option<f64>,
}

pub fn gradcheck(args: GradcheckArgs, conf: &FileConfig) -> Result<()> {
    let epsilon = conf::resolve(args.epsilon, conf, "epsilon", 1e-5)?;
    let (model, sample) = gradcheck_fixture()?;
    let err = model_grad_check(&model, &sample, epsilon)?;
    println!("max relative error {err:.3e} (epsilon {epsilon:.1e}, threshold {GRAD_THRESHOLD:.0e})");
    if err >= GRAD_THRESHOLD {
        return Err(Error::Numeric(format!(
            "gradient check failed: max relative error {err:.3e} >= {GRAD_THRESHOLD:.0e}"
        )));
    }
    Ok(())
}

#[derive(Args)]
pub struct ReportArgs {
    /// Metrics CSV produced by train.
    #[arg(long, value_name = "FILE")]
    pub metrics: PathBuf,
    /// Output SVG file.
    #[arg(long, value_name = "FILE")]
    pub out: PathBuf,
}

pub fn report(args: ReportArgs, _conf: &FileConfig) -> Result<()> {
    let metrics = Metrics::read_csv(&args.metrics)?;
    let svg = crate::report::render(&metrics)?;
    write_text(&args.out, &svg)?;
    println!("points {}", metrics.rows.len());
    println!("svg {}", args.out.display());
    Ok(())
}
