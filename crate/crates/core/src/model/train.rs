use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{dropout_rng, SequentialModel};
use crate::data::LabeledDataset;
use crate::error::{Error, Result};
use crate::layers::TrainMode;
use crate::optimize::{accuracy, bce_loss, RmsProp, RmsPropConfig};
use crate::tensor::Scalar;

/// Header line of the per-epoch metrics CSV.
pub const METRICS_HEADER: &str = "epoch,train_loss,train_acc,val_loss,val_acc";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    /// Drives minibatch shuffling and dropout masks.
    pub seed: u64,
    pub optimizer: RmsPropConfig,
    /// Share of the training set held out for validation when no separate
    /// validation set is supplied.
    pub validation_fraction: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 20,
            batch_size: 32,
            seed: 42,
            optimizer: RmsPropConfig::default(),
            validation_fraction: 0.0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be at least 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be at least 1".into()));
        }
        if !(0.0..1.0).contains(&self.validation_fraction) {
            return Err(Error::Config(format!(
                "validation fraction must be in [0, 1), got {}",
                self.validation_fraction
            )));
        }
        self.optimizer.validate()
    }
}

/// Metrics after one epoch, measured by inference-mode passes over the full
/// training and validation sets. Epochs are numbered from 1.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub train_acc: f64,
    pub val_loss: f64,
    pub val_acc: f64,
}

impl EpochRecord {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{:.6},{:.6},{:.6},{:.6}",
            self.epoch, self.train_loss, self.train_acc, self.val_loss, self.val_acc
        )
    }
}

/// Receives one record per finished epoch.
pub trait MetricsSink {
    fn record(&mut self, record: &EpochRecord) -> Result<()>;

    /// Checked after each record; `true` ends training early.
    fn stop_requested(&self) -> bool {
        false
    }
}

impl MetricsSink for Vec<EpochRecord> {
    fn record(&mut self, record: &EpochRecord) -> Result<()> {
        self.push(*record);
        Ok(())
    }
}

impl MetricsSink for () {
    fn record(&mut self, _record: &EpochRecord) -> Result<()> {
        Ok(())
    }
}

/// Writes records as CSV rows under [`METRICS_HEADER`], flushing each row.
pub struct CsvMetrics<W: Write> {
    out: W,
    label: PathBuf,
}

impl CsvMetrics<BufWriter<File>> {
    pub fn create(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        CsvMetrics::new(BufWriter::new(file), path)
    }
}

impl<W: Write> CsvMetrics<W> {
    /// `label` names the destination in error messages.
    pub fn new(mut out: W, label: impl Into<PathBuf>) -> Result<Self> {
        let label = label.into();
        writeln!(out, "{METRICS_HEADER}")
            .and_then(|_| out.flush())
            .map_err(|e| Error::io(&label, e))?;
        Ok(CsvMetrics { out, label })
    }

    pub fn into_inner(self) -> W {
        self.out
    }
}

impl<W: Write> MetricsSink for CsvMetrics<W> {
    fn record(&mut self, record: &EpochRecord) -> Result<()> {
        writeln!(self.out, "{}", record.csv_row())
            .and_then(|_| self.out.flush())
            .map_err(|e| Error::io(&self.label, e))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Evaluation {
    pub loss: f64,
    pub accuracy: f64,
}

impl<T: Scalar> SequentialModel<T> {
    fn check_dataset(&self, data: &LabeledDataset, what: &str) -> Result<()> {
        if data.is_empty() {
            return Err(Error::Data(format!("{what} set is empty")));
        }
        if data.image_shape() != self.input_shape() {
            return Err(Error::shape(format!(
                "{what} images are {} but the model expects {}",
                data.image_shape(),
                self.input_shape()
            )));
        }
        Ok(())
    }

    /// Mean loss and accuracy over `data` in inference mode.
    pub fn evaluate(&self, data: &LabeledDataset, batch_size: usize) -> Result<Evaluation> {
        self.check_dataset(data, "evaluation")?;
        let mut loss = 0.0;
        let mut correct = 0.0;
        for (x, y) in data.ordered_batches(batch_size)? {
            let n = x.dims()[0] as f64;
            let p = self.predict(&x.cast::<T>())?;
            let y = y.cast::<T>();
            loss += bce_loss(&p, &y)?.value * n;
            correct += accuracy(&p, &y)? * n;
        }
        let total = data.len() as f64;
        Ok(Evaluation {
            loss: loss / total,
            accuracy: correct / total,
        })
    }

    /// Trains with minibatch RMSProp on binary cross entropy.
    ///
    /// Each epoch reshuffles `train` from `(cfg.seed, epoch)`, updates after
    /// every batch (including a final short one), then evaluates both sets in
    /// inference mode and hands the record to `sink`. Training ends early
    /// once the sink asks to stop.
    pub fn fit(
        &mut self,
        train: &LabeledDataset,
        val: &LabeledDataset,
        cfg: &TrainConfig,
        sink: &mut dyn MetricsSink,
    ) -> Result<Vec<EpochRecord>> {
        cfg.validate()?;
        self.check_dataset(train, "training")?;
        self.check_dataset(val, "validation")?;
        if self.output_shape().dims() != [train.class_names().len()] {
            return Err(Error::shape(format!(
                "model output {} does not match {} classes",
                self.output_shape(),
                train.class_names().len()
            )));
        }

        let mut optimizer = RmsProp::<T>::new(cfg.optimizer)?;
        self.set_dropout_rng(dropout_rng(cfg.seed));
        let mut records = Vec::with_capacity(cfg.epochs);

        for epoch in 1..=cfg.epochs {
            self.set_mode(TrainMode::Training);
            for (batch, (x, y)) in train.batches(cfg.batch_size, cfg.seed, epoch as u64)?.enumerate() {
                let at = |e: Error| match e {
                    Error::Numeric(msg) => Error::Numeric(format!("epoch {epoch}, batch {batch}: {msg}")),
                    other => other,
                };
                self.zero_grad();
                let p = self.forward(&x.cast::<T>()).map_err(at)?;
                let loss = bce_loss(&p, &y.cast::<T>()).map_err(at)?;
                self.backward(&loss.grad).map_err(at)?;
                optimizer.step(self.params_mut())?;
            }
            self.set_mode(TrainMode::Inference);

            if let Some((name, _)) = self.named_params().iter().find(|(_, p)| !p.value.all_finite()) {
                return Err(Error::Numeric(format!(
                    "epoch {epoch}: parameter {name} became non-finite"
                )));
            }

            let at = |e: Error| match e {
                Error::Numeric(msg) => Error::Numeric(format!("epoch {epoch}, evaluation: {msg}")),
                other => other,
            };
            let tr = self.evaluate(train, cfg.batch_size).map_err(at)?;
            let va = self.evaluate(val, cfg.batch_size).map_err(at)?;
            let record = EpochRecord {
                epoch,
                train_loss: tr.loss,
                train_acc: tr.accuracy,
                val_loss: va.loss,
                val_acc: va.accuracy,
            };
            sink.record(&record)?;
            records.push(record);
            if sink.stop_requested() {
                break;
            }
        }
        Ok(records)
    }
}
