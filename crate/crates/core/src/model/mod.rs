//! Sequential model container, the blood-cell architecture, training and
//! checkpoints.

mod checkpoint;
mod train;

use std::collections::HashMap;
use std::fmt::Write as _;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub use checkpoint::{CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use train::{CsvMetrics, EpochRecord, Evaluation, MetricsSink, TrainConfig, METRICS_HEADER};

use crate::error::{Error, Result};
use crate::layers::{LayerNode, LayerSpec, Param, ParamMut, TrainMode};
use crate::tensor::{Scalar, Shape, Tensor};

/// Input shape of the blood-cell model: height 120, width 160, RGB.
pub const BLOOD_CELL_INPUT_SHAPE: [usize; 3] = [120, 160, 3];

/// Dropout draws use this ChaCha stream so they never overlap weight init.
pub(crate) const DROPOUT_STREAM: u64 = u64::MAX;

pub(crate) fn dropout_rng(seed: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(DROPOUT_STREAM);
    rng
}

/// The 19-layer stack: rescale, three conv(32)/relu/pool stages, a
/// conv(64)/relu/pool stage, flatten, dense(64), relu, dropout(0.5),
/// dense(2), sigmoid.
pub fn blood_cell_architecture() -> Vec<LayerSpec> {
    let mut specs = vec![LayerSpec::Rescale { divisor: 255.0 }];
    for filters in [32, 32, 32, 64] {
        specs.push(LayerSpec::Conv2d {
            filters,
            kernel: [3, 3],
        });
        specs.push(LayerSpec::Relu);
        specs.push(LayerSpec::MaxPool2d { pool: 2 });
    }
    specs.extend([
        LayerSpec::Flatten,
        LayerSpec::Dense { units: 64 },
        LayerSpec::Relu,
        LayerSpec::Dropout { ratio: 0.5 },
        LayerSpec::Dense { units: 2 },
        LayerSpec::Sigmoid,
    ]);
    specs
}

/// Builds the blood-cell classifier for `input_shape` (normally
/// [`BLOOD_CELL_INPUT_SHAPE`]) with weights drawn from `seed`.
pub fn build_blood_cell_model<T: Scalar>(input_shape: &Shape, seed: u64) -> Result<SequentialModel<T>> {
    SequentialModel::new(input_shape.clone(), &blood_cell_architecture(), seed)
}

/// One line of a model summary.
#[derive(Debug, Clone, PartialEq)]
pub struct SummaryRow {
    pub name: String,
    pub type_label: &'static str,
    pub output_shape: Shape,
    pub params: usize,
}

/// Ordered stack of layers applied one after another.
#[derive(Debug, Clone)]
pub struct SequentialModel<T: Scalar = f32> {
    input_shape: Shape,
    layers: Vec<LayerNode<T>>,
    names: Vec<String>,
    seed: u64,
    mode: TrainMode,
    rng: ChaCha8Rng,
}

impl<T: Scalar> SequentialModel<T> {
    /// Chains `specs` starting from the per-sample `input_shape`.
    pub fn new(input_shape: Shape, specs: &[LayerSpec], seed: u64) -> Result<Self> {
        if specs.is_empty() {
            return Err(Error::Config("a model needs at least one layer".into()));
        }
        let mut init_rng = ChaCha8Rng::seed_from_u64(seed);
        let mut layers = Vec::with_capacity(specs.len());
        let mut shape = input_shape.clone();
        for (i, spec) in specs.iter().enumerate() {
            let layer = LayerNode::from_spec(spec, &shape, &mut init_rng).map_err(|e| match e {
                Error::Shape(msg) => Error::Shape(format!(
                    "layer {} ({:?}) cannot take input {shape}: {msg}",
                    i + 1,
                    spec.kind()
                )),
                other => other,
            })?;
            shape = layer.output_shape().clone();
            layers.push(layer);
        }
        let mut counters: HashMap<&str, usize> = HashMap::new();
        let names = layers
            .iter()
            .map(|l| {
                let prefix = l.kind().name_prefix();
                let n = counters.entry(prefix).or_insert(0);
                *n += 1;
                format!("{prefix}_{n}")
            })
            .collect();
        Ok(SequentialModel {
            input_shape,
            layers,
            names,
            seed,
            mode: TrainMode::Inference,
            rng: dropout_rng(seed),
        })
    }

    pub fn input_shape(&self) -> &Shape {
        &self.input_shape
    }

    pub fn output_shape(&self) -> &Shape {
        self.layers.last().expect("model has layers").output_shape()
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn mode(&self) -> TrainMode {
        self.mode
    }

    pub fn set_mode(&mut self, mode: TrainMode) {
        self.mode = mode;
    }

    pub fn layers(&self) -> &[LayerNode<T>] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [LayerNode<T>] {
        &mut self.layers
    }

    pub fn layer_names(&self) -> &[String] {
        &self.names
    }

    pub fn specs(&self) -> Vec<LayerSpec> {
        self.layers.iter().map(|l| l.spec()).collect()
    }

    pub(crate) fn dropout_rng_state(&self) -> &ChaCha8Rng {
        &self.rng
    }

    pub(crate) fn set_dropout_rng(&mut self, rng: ChaCha8Rng) {
        self.rng = rng;
    }

    /// Digest of every ReLU sign and pooling winner from the last forward
    /// pass. Two passes with equal digests ran through the same linear
    /// pieces.
    pub(crate) fn branch_signature(&self) -> u64 {
        let mut h = std::collections::hash_map::DefaultHasher::new();
        for layer in &self.layers {
            layer.branch_hash(&mut h);
        }
        std::hash::Hasher::finish(&h)
    }

    /// Every parameter tensor in layer order, named `<layer>/<param>`.
    pub fn named_params(&self) -> Vec<(String, Param<'_, T>)> {
        self.layers
            .iter()
            .zip(&self.names)
            .flat_map(|(l, name)| l.params().into_iter().map(move |p| (format!("{name}/{}", p.name), p)))
            .collect()
    }

    pub fn params_mut(&mut self) -> Vec<ParamMut<'_, T>> {
        self.layers.iter_mut().flat_map(|l| l.params_mut()).collect()
    }

    pub fn total_params(&self) -> usize {
        self.layers.iter().map(|l| l.param_count()).sum()
    }

    pub fn zero_grad(&mut self) {
        self.layers.iter_mut().for_each(|l| l.zero_grad());
    }

    fn check_input(&self, x: &Tensor<T>) -> Result<()> {
        let dims = x.dims();
        if dims.len() != self.input_shape.rank() + 1 || &dims[1..] != self.input_shape.dims() {
            return Err(Error::shape(format!(
                "model expects input {} with a leading batch dimension, got {}",
                self.input_shape.batch_notation(),
                x.shape()
            )));
        }
        Ok(())
    }

    /// Forward pass in the current mode, caching activations for
    /// [`backward`](Self::backward).
    pub fn forward(&mut self, x: &Tensor<T>) -> Result<Tensor<T>> {
        self.check_input(x)?;
        let mode = self.mode;
        let mut layers = self.layers.iter_mut();
        let first = layers.next().expect("model has layers");
        let mut y = first.forward(x, mode, &mut self.rng)?;
        for layer in layers {
            y = layer.forward(&y, mode, &mut self.rng)?;
        }
        Ok(y)
    }

    /// Backpropagates `upstream` (gradient w.r.t. the model output) through
    /// every layer and returns the gradient w.r.t. the model input.
    pub fn backward(&mut self, upstream: &Tensor<T>) -> Result<Tensor<T>> {
        let mut g = upstream.clone();
        for layer in self.layers.iter_mut().rev() {
            g = layer.backward(&g)?;
        }
        Ok(g)
    }

    /// Inference-mode probabilities for a batch `[n, ..input_shape]`.
    pub fn predict(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        self.check_input(x)?;
        let mut layers = self.layers.iter();
        let mut y = layers.next().expect("model has layers").infer(x)?;
        for layer in layers {
            y = layer.infer(&y)?;
        }
        Ok(y)
    }

    pub fn summary_rows(&self) -> Vec<SummaryRow> {
        self.layers
            .iter()
            .zip(&self.names)
            .map(|(l, name)| SummaryRow {
                name: name.clone(),
                type_label: l.kind().type_label(),
                output_shape: l.output_shape().clone(),
                params: l.param_count(),
            })
            .collect()
    }

    /// Layer table with output shapes and parameter counts.
    pub fn summary(&self) -> String {
        let rule = "=".repeat(72);
        let mut out = String::new();
        let _ = writeln!(out, "{:<34}{:<26}{:>12}", "Layer (type)", "Output Shape", "Param #");
        let _ = writeln!(out, "{rule}");
        for row in self.summary_rows() {
            let label = format!("{} ({})", row.name, row.type_label);
            let _ = writeln!(
                out,
                "{label:<34}{:<26}{:>12}",
                row.output_shape.batch_notation(),
                row.params
            );
        }
        let _ = writeln!(out, "{rule}");
        let _ = writeln!(out, "Total params: {}", self.total_params());
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn reference_model() -> SequentialModel<f32> {
        build_blood_cell_model(&Shape::new(BLOOD_CELL_INPUT_SHAPE.to_vec()).unwrap(), 42).unwrap()
    }

    #[test]
    fn blood_cell_model_matches_layer_table() {
        let m = reference_model();
        let rows = m.summary_rows();
        let expected: [(&str, &[usize], usize); 19] = [
            ("lambda_1", &[120, 160, 3], 0),
            ("conv2d_1", &[118, 158, 32], 896),
            ("activation_1", &[118, 158, 32], 0),
            ("max_pooling2d_1", &[59, 79, 32], 0),
            ("conv2d_2", &[57, 77, 32], 9248),
            ("activation_2", &[57, 77, 32], 0),
            ("max_pooling2d_2", &[28, 38, 32], 0),
            ("conv2d_3", &[26, 36, 32], 9248),
            ("activation_3", &[26, 36, 32], 0),
            ("max_pooling2d_3", &[13, 18, 32], 0),
            ("conv2d_4", &[11, 16, 64], 18496),
            ("activation_4", &[11, 16, 64], 0),
            ("max_pooling2d_4", &[5, 8, 64], 0),
            ("flatten_1", &[2560], 0),
            ("dense_1", &[64], 163904),
            ("activation_5", &[64], 0),
            ("dropout_1", &[64], 0),
            ("dense_2", &[2], 130),
            ("activation_6", &[2], 0),
        ];
        assert_eq!(rows.len(), 19);
        for (row, (name, dims, params)) in rows.iter().zip(expected) {
            assert_eq!(row.name, name);
            assert_eq!(row.output_shape.dims(), dims, "{name}");
            assert_eq!(row.params, params, "{name}");
        }
        assert_eq!(m.total_params(), 201922);
    }

    #[test]
    fn summary_text() {
        let text = reference_model().summary();
        let conv = text.lines().find(|l| l.starts_with("conv2d_1")).unwrap();
        assert!(conv.contains("(None, 118, 158, 32)") && conv.trim_end().ends_with("896"));
        let dense = text.lines().find(|l| l.starts_with("dense_1")).unwrap();
        assert!(dense.contains("(None, 64)") && dense.trim_end().ends_with("163904"));
        assert!(text.contains("Total params: 201922"));
    }

    #[test]
    fn single_dense_summary() {
        let m: SequentialModel<f32> =
            SequentialModel::new(Shape::new(vec![2]).unwrap(), &[LayerSpec::Dense { units: 2 }], 0).unwrap();
        assert_eq!(m.summary_rows()[0].params, 6);
    }

    #[test]
    fn too_small_input_is_a_shape_error() {
        let r = build_blood_cell_model::<f32>(&Shape::new(vec![4, 4, 3]).unwrap(), 0);
        assert!(matches!(r, Err(Error::Shape(_))));
        // smallest square input that survives all four stages
        assert!(build_blood_cell_model::<f32>(&Shape::new(vec![46, 46, 3]).unwrap(), 0).is_ok());
        assert!(build_blood_cell_model::<f32>(&Shape::new(vec![45, 46, 3]).unwrap(), 0).is_err());
    }

    #[test]
    fn same_seed_same_weights() {
        let a = reference_model();
        let b = reference_model();
        for ((_, pa), (_, pb)) in a.named_params().iter().zip(b.named_params().iter()) {
            assert_eq!(pa.value, pb.value);
        }
        let c: SequentialModel<f32> =
            build_blood_cell_model(&Shape::new(BLOOD_CELL_INPUT_SHAPE.to_vec()).unwrap(), 43).unwrap();
        assert_ne!(a.named_params()[0].1.value, c.named_params()[0].1.value);
    }

    #[test]
    fn predictions_are_probabilities_and_repeatable() {
        let m: SequentialModel<f32> = build_blood_cell_model(&Shape::new(vec![48, 64, 3]).unwrap(), 1).unwrap();
        let x = Tensor::from_vec(
            &[2, 48, 64, 3],
            (0..2 * 48 * 64 * 3).map(|i| (i % 256) as f32).collect(),
        )
        .unwrap();
        let a = m.predict(&x).unwrap();
        assert_eq!(a.dims(), &[2, 2]);
        assert!(a.data().iter().all(|&p| p > 0.0 && p < 1.0));
        assert_eq!(a, m.predict(&x).unwrap());
    }

    #[test]
    fn zeroed_head_predicts_one_half() {
        let mut m: SequentialModel<f32> = build_blood_cell_model(&Shape::new(vec![48, 64, 3]).unwrap(), 1).unwrap();
        let last_dense = m.layers_mut().iter_mut().rev().find(|l| l.param_count() > 0).unwrap();
        for p in last_dense.params_mut() {
            p.value.fill(0.0);
        }
        let x = Tensor::full(&[1, 48, 64, 3], 100.0).unwrap();
        assert_eq!(m.predict(&x).unwrap().data(), &[0.5, 0.5]);
    }

    #[test]
    fn predict_rejects_wrong_shape() {
        let m: SequentialModel<f32> = build_blood_cell_model(&Shape::new(vec![48, 64, 3]).unwrap(), 1).unwrap();
        let x = Tensor::full(&[1, 64, 48, 3], 1.0).unwrap();
        assert!(matches!(m.predict(&x), Err(Error::Shape(_))));
    }
}
