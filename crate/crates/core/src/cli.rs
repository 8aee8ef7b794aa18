//! Command-line front end.
//!
//! Results go to stdout, diagnostics to stderr. Exit codes: 0 success,
//! 1 usage or configuration, 2 data or file format, 3 numeric failure.

use std::ffi::OsString;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::{load_dataset, load_image, ClassMapping, LabeledDataset};
use crate::error::{Error, Result};
use crate::model::{
    build_blood_cell_model, CsvMetrics, MetricsSink, SequentialModel, TrainConfig, BLOOD_CELL_INPUT_SHAPE,
};
use crate::optimize::{finite_difference_check, GradCheckConfig, Objective};
use crate::tensor::{Shape, Tensor};

/// Default input for `gradcheck`: the smallest convenient size the full
/// stack accepts.
pub const GRADCHECK_INPUT_SHAPE: [usize; 3] = [48, 64, 3];

#[derive(Debug, Parser)]
#[command(
    name = "hemocnn",
    version,
    about = "Blood-cell CNN: summarize, train, evaluate, predict, verify gradients"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Print the layer table with output shapes and parameter counts.
    Summary {
        #[arg(long, value_parser = parse_shape)]
        input_shape: Option<Shape>,
        #[arg(long, default_value_t = 42)]
        seed: u64,
    },
    /// Train on a dataset and write a checkpoint plus per-epoch metrics.
    Train(TrainArgs),
    /// Report loss and accuracy of a checkpoint on a dataset.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        class_map: Option<PathBuf>,
        #[arg(long, default_value_t = 32)]
        batch_size: usize,
    },
    /// Classify image files, or every file under the given directories.
    Predict {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(required = true)]
        paths: Vec<PathBuf>,
    },
    /// Compare backpropagated gradients with central finite differences.
    Gradcheck {
        #[arg(long, value_parser = parse_shape)]
        input_shape: Option<Shape>,
        #[arg(long, default_value_t = 42)]
        seed: u64,
        #[arg(long, default_value_t = 1e-4)]
        tolerance: f64,
        #[arg(long, default_value_t = 1e-5)]
        epsilon: f64,
    },
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Dataset root: `TRAIN/` and `TEST/` subfolders, or class folders directly.
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Metrics CSV destination; stdout when omitted.
    #[arg(long)]
    pub metrics_out: Option<PathBuf>,
    #[arg(long)]
    pub class_map: Option<PathBuf>,
    #[arg(long, default_value_t = 20)]
    pub epochs: usize,
    #[arg(long, default_value_t = 32)]
    pub batch_size: usize,
    #[arg(long, default_value_t = 42)]
    pub seed: u64,
    #[arg(long)]
    pub lr: Option<f64>,
    /// Hold out this share of the training set instead of using `TEST/`.
    #[arg(long, default_value_t = 0.0)]
    pub val_fraction: f64,
    #[arg(long, value_parser = parse_shape)]
    pub input_shape: Option<Shape>,
}

fn parse_shape(s: &str) -> std::result::Result<Shape, String> {
    let dims = s
        .split(',')
        .map(|d| {
            d.trim()
                .parse::<usize>()
                .map_err(|e| format!("bad dimension {d:?}: {e}"))
        })
        .collect::<std::result::Result<Vec<_>, _>>()?;
    if dims.len() != 3 {
        return Err(format!("expected h,w,c, got {} dimensions", dims.len()));
    }
    Shape::new(dims).map_err(|e| e.to_string())
}

/// Parses `args` (program name first), runs the command and returns the
/// process exit code.
pub fn run<I, S>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let text = e.render().to_string();
            let _ = if code == 0 {
                out.write_all(text.as_bytes())
            } else {
                err.write_all(text.as_bytes())
            };
            return code;
        }
    };
    match execute(cli.command, out, err) {
        Ok(code) => code,
        Err(e) => {
            let _ = writeln!(err, "error: {e}");
            e.exit_code()
        }
    }
}

fn execute(command: Command, out: &mut dyn Write, err: &mut dyn Write) -> Result<i32> {
    match command {
        Command::Summary { input_shape, seed } => {
            let shape = input_shape.unwrap_or_else(default_shape);
            let model: SequentialModel<f32> = build_blood_cell_model(&shape, seed)?;
            emit(out, &model.summary())?;
            Ok(0)
        }
        Command::Train(args) => train(args, out, err),
        Command::Eval {
            checkpoint,
            data,
            class_map,
            batch_size,
        } => {
            let model = SequentialModel::<f32>::load(&checkpoint)?;
            let mapping = mapping(class_map.as_deref())?;
            let root = subdir_or_root(&data, "TEST");
            let set = load_dataset(&root, &mapping, model.input_shape())?;
            let ev = model.evaluate(&set, batch_size)?;
            emit(out, &format!("accuracy={:.4}\nloss={:.6}\n", ev.accuracy, ev.loss))?;
            Ok(0)
        }
        Command::Predict { checkpoint, paths } => predict(&checkpoint, &paths, out),
        Command::Gradcheck {
            input_shape,
            seed,
            tolerance,
            epsilon,
        } => gradcheck(input_shape, seed, tolerance, epsilon, out, err),
    }
}

fn default_shape() -> Shape {
    Shape::new(BLOOD_CELL_INPUT_SHAPE.to_vec()).expect("non-empty shape")
}

fn emit(out: &mut dyn Write, text: &str) -> Result<()> {
    out.write_all(text.as_bytes())
        .and_then(|_| out.flush())
        .map_err(|e| Error::io("<stdout>", e))
}

fn mapping(path: Option<&Path>) -> Result<ClassMapping> {
    path.map_or_else(|| Ok(ClassMapping::default()), ClassMapping::from_json_file)
}

fn subdir_or_root(root: &Path, name: &str) -> PathBuf {
    let sub = root.join(name);
    if sub.is_dir() {
        sub
    } else {
        root.to_path_buf()
    }
}

fn describe(set: &LabeledDataset) -> String {
    let counts = set.class_counts();
    set.class_names()
        .iter()
        .zip(counts)
        .map(|(name, n)| format!("{name}={n}"))
        .collect::<Vec<_>>()
        .join(" ")
}

fn train(args: TrainArgs, out: &mut dyn Write, err: &mut dyn Write) -> Result<i32> {
    let mut cfg = TrainConfig {
        epochs: args.epochs,
        batch_size: args.batch_size,
        seed: args.seed,
        validation_fraction: args.val_fraction,
        ..TrainConfig::default()
    };
    if let Some(lr) = args.lr {
        cfg.optimizer.learning_rate = lr;
    }
    cfg.validate()?;

    let shape = args.input_shape.unwrap_or_else(default_shape);
    let mapping = mapping(args.class_map.as_deref())?;
    if !args.data.is_dir() {
        return Err(Error::Data(format!(
            "dataset root {} is not a directory",
            args.data.display()
        )));
    }
    let full = load_dataset(subdir_or_root(&args.data, "TRAIN"), &mapping, &shape)?;
    let (train_set, val_set) = if cfg.validation_fraction > 0.0 {
        full.split_stratified(cfg.validation_fraction, cfg.seed)?
    } else {
        let test = args.data.join("TEST");
        if !test.is_dir() {
            return Err(Error::Config(format!(
                "no validation data: {} is missing and --val-fraction is 0",
                test.display()
            )));
        }
        (full, load_dataset(test, &mapping, &shape)?)
    };
    let _ = writeln!(err, "train: {} images ({})", train_set.len(), describe(&train_set));
    let _ = writeln!(err, "val:   {} images ({})", val_set.len(), describe(&val_set));

    let mut model: SequentialModel<f32> = build_blood_cell_model(&shape, cfg.seed)?;
    let records = match &args.metrics_out {
        Some(path) => {
            let mut sink = CsvMetrics::create(path)?;
            model.fit(&train_set, &val_set, &cfg, &mut Progress { inner: &mut sink, err })?
        }
        None => {
            let mut sink = CsvMetrics::new(&mut *out, "<stdout>")?;
            model.fit(&train_set, &val_set, &cfg, &mut Progress { inner: &mut sink, err })?
        }
    };
    model.save(&args.checkpoint)?;
    if let Some(last) = records.last() {
        let _ = writeln!(err, "saved {} (val_acc={:.4})", args.checkpoint.display(), last.val_acc);
    }
    Ok(0)
}

struct Progress<'a> {
    inner: &'a mut dyn MetricsSink,
    err: &'a mut dyn Write,
}

impl MetricsSink for Progress<'_> {
    fn record(&mut self, r: &crate::model::EpochRecord) -> Result<()> {
        let _ = writeln!(
            self.err,
            "epoch {:>3}  loss {:.4}  acc {:.4}  val_loss {:.4}  val_acc {:.4}",
            r.epoch, r.train_loss, r.train_acc, r.val_loss, r.val_acc
        );
        self.inner.record(r)
    }

    fn stop_requested(&self) -> bool {
        self.inner.stop_requested()
    }
}

fn collect_files(path: &Path, files: &mut Vec<PathBuf>) -> Result<()> {
    if !path.is_dir() {
        files.push(path.to_path_buf());
        return Ok(());
    }
    let mut entries = fs::read_dir(path)
        .map_err(|e| Error::io(path, e))?
        .map(|e| e.map(|e| e.path()).map_err(|e| Error::io(path, e)))
        .collect::<Result<Vec<_>>>()?;
    entries.retain(|p| {
        !p.file_name()
            .and_then(|n| n.to_str())
            .is_some_and(|n| n.starts_with('.'))
    });
    entries.sort();
    for entry in entries {
        collect_files(&entry, files)?;
    }
    Ok(())
}

fn predict(checkpoint: &Path, paths: &[PathBuf], out: &mut dyn Write) -> Result<i32> {
    let model = SequentialModel::<f32>::load(checkpoint)?;
    let mut files = Vec::new();
    for p in paths {
        collect_files(p, &mut files)?;
    }
    if files.is_empty() {
        return Err(Error::Data("no image files to classify".into()));
    }
    let shape = model.input_shape().clone();
    let mut text = String::new();
    for file in &files {
        let img = load_image(file, &shape)?;
        let x = img.reshape(shape.with_batch(1)?)?;
        let p = model.predict(&x)?;
        let probs = p.data();
        let label = if probs[1] > probs[0] {
            "POLYNUCLEAR"
        } else {
            "MONONUCLEAR"
        };
        text.push_str(&format!("{},{label},{:.6},{:.6}\n", file.display(), probs[0], probs[1]));
    }
    emit(out, &text)?;
    Ok(0)
}

fn gradcheck(
    input_shape: Option<Shape>,
    seed: u64,
    tolerance: f64,
    epsilon: f64,
    out: &mut dyn Write,
    err: &mut dyn Write,
) -> Result<i32> {
    if !(tolerance.is_finite() && tolerance > 0.0) {
        return Err(Error::Config(format!("tolerance must be positive, got {tolerance}")));
    }
    let shape = input_shape.unwrap_or_else(|| Shape::new(GRADCHECK_INPUT_SHAPE.to_vec()).expect("non-empty"));
    let mut model: SequentialModel<f64> = build_blood_cell_model(&shape, seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let batch = shape.with_batch(2)?;
    let x = Tensor::from_vec(
        batch.dims(),
        (0..batch.numel()).map(|_| rng.gen_range(0.0..255.0)).collect(),
    )?;
    let targets = Tensor::from_vec(&[2, 2], vec![1.0, 0.0, 0.0, 1.0])?;
    let cfg = GradCheckConfig {
        epsilon,
        seed,
        ..GradCheckConfig::default()
    };
    let report = finite_difference_check(&mut model, &x, &targets, Objective::BinaryCrossEntropy, &cfg)?;

    let mut text = String::new();
    for e in &report.entries {
        text.push_str(&format!(
            "{}/{} checked={} skipped={} max_rel_error={:.3e}\n",
            e.layer, e.tensor, e.checked, e.skipped, e.max_rel_error
        ));
    }
    let worst = report.max_rel_error();
    text.push_str(&format!("max_rel_error={worst:.3e}\n"));
    emit(out, &text)?;
    if report.passed(tolerance) {
        Ok(0)
    } else {
        let _ = writeln!(
            err,
            "error: max relative error {worst:.3e} is not below tolerance {tolerance:e}"
        );
        Ok(3)
    }
}
