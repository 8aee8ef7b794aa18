//! Differentiable layers.
//!
//! Every layer works on batches: the leading dimension of an input tensor is
//! the sample index and the remaining dimensions must equal the layer's
//! per-sample input shape. Backward passes are written out by hand for each
//! layer kind; there is no autodiff graph.
//!
//! Parameter gradients *accumulate* across backward calls until
//! [`LayerNode::zero_grad`] is called.

mod conv;
mod dense;
mod elementwise;
mod pool;
mod reshape;

use rand::{Rng, RngCore};
use serde::{Deserialize, Serialize};

pub use conv::Conv2d;
pub use dense::Dense;
pub use elementwise::{Relu, Rescale, Sigmoid};
pub use pool::MaxPool2d;
pub use reshape::{Dropout, Flatten};

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Shape, Tensor};

/// Whether dropout is active. All other layers behave identically in both.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum TrainMode {
    Training,
    #[default]
    Inference,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum LayerKind {
    Rescale,
    Conv2d,
    Relu,
    MaxPool2d,
    Flatten,
    Dense,
    Dropout,
    Sigmoid,
}

impl LayerKind {
    /// Prefix of the auto-generated layer name (`conv2d_1`, `activation_3`, ...).
    pub fn name_prefix(self) -> &'static str {
        match self {
            LayerKind::Rescale => "lambda",
            LayerKind::Conv2d => "conv2d",
            LayerKind::Relu | LayerKind::Sigmoid => "activation",
            LayerKind::MaxPool2d => "max_pooling2d",
            LayerKind::Flatten => "flatten",
            LayerKind::Dense => "dense",
            LayerKind::Dropout => "dropout",
        }
    }

    /// Type label shown in model summaries.
    pub fn type_label(self) -> &'static str {
        match self {
            LayerKind::Rescale => "Lambda",
            LayerKind::Conv2d => "Conv2D",
            LayerKind::Relu | LayerKind::Sigmoid => "Activation",
            LayerKind::MaxPool2d => "MaxPooling2D",
            LayerKind::Flatten => "Flatten",
            LayerKind::Dense => "Dense",
            LayerKind::Dropout => "Dropout",
        }
    }
}

/// Architecture of one layer: its kind plus hyperparameters, without weights.
///
/// This is what the checkpoint header stores for each layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LayerSpec {
    Rescale { divisor: f64 },
    Conv2d { filters: usize, kernel: [usize; 2] },
    Relu,
    MaxPool2d { pool: usize },
    Flatten,
    Dense { units: usize },
    Dropout { ratio: f64 },
    Sigmoid,
}

impl LayerSpec {
    pub fn kind(&self) -> LayerKind {
        match self {
            LayerSpec::Rescale { .. } => LayerKind::Rescale,
            LayerSpec::Conv2d { .. } => LayerKind::Conv2d,
            LayerSpec::Relu => LayerKind::Relu,
            LayerSpec::MaxPool2d { .. } => LayerKind::MaxPool2d,
            LayerSpec::Flatten => LayerKind::Flatten,
            LayerSpec::Dense { .. } => LayerKind::Dense,
            LayerSpec::Dropout { .. } => LayerKind::Dropout,
            LayerSpec::Sigmoid => LayerKind::Sigmoid,
        }
    }
}

/// A named view of one parameter tensor.
#[derive(Debug)]
pub struct Param<'a, T: Scalar> {
    pub name: &'static str,
    pub value: &'a Tensor<T>,
    pub grad: &'a Tensor<T>,
}

/// Mutable parameter paired with its accumulated gradient.
#[derive(Debug)]
pub struct ParamMut<'a, T: Scalar> {
    pub name: &'static str,
    pub value: &'a mut Tensor<T>,
    pub grad: &'a Tensor<T>,
}

#[derive(Debug, Clone)]
pub enum LayerNode<T: Scalar> {
    Rescale(Rescale<T>),
    Conv2d(Conv2d<T>),
    Relu(Relu<T>),
    MaxPool2d(MaxPool2d<T>),
    Flatten(Flatten<T>),
    Dense(Dense<T>),
    Dropout(Dropout<T>),
    Sigmoid(Sigmoid<T>),
}

macro_rules! dispatch {
    ($self:expr, $l:ident => $body:expr) => {
        match $self {
            LayerNode::Rescale($l) => $body,
            LayerNode::Conv2d($l) => $body,
            LayerNode::Relu($l) => $body,
            LayerNode::MaxPool2d($l) => $body,
            LayerNode::Flatten($l) => $body,
            LayerNode::Dense($l) => $body,
            LayerNode::Dropout($l) => $body,
            LayerNode::Sigmoid($l) => $body,
        }
    };
}

impl<T: Scalar> LayerNode<T> {
    /// Builds a layer for the given per-sample input shape. Weights are
    /// Glorot-uniform from `rng`, biases zero.
    pub fn from_spec(spec: &LayerSpec, input: &Shape, rng: &mut dyn RngCore) -> Result<Self> {
        Ok(match *spec {
            LayerSpec::Rescale { divisor } => LayerNode::Rescale(Rescale::new(input.clone(), divisor)?),
            LayerSpec::Conv2d { filters, kernel } => LayerNode::Conv2d(Conv2d::new(input, filters, kernel, rng)?),
            LayerSpec::Relu => LayerNode::Relu(Relu::new(input.clone())),
            LayerSpec::MaxPool2d { pool } => LayerNode::MaxPool2d(MaxPool2d::new(input, pool)?),
            LayerSpec::Flatten => LayerNode::Flatten(Flatten::new(input.clone())),
            LayerSpec::Dense { units } => LayerNode::Dense(Dense::new(input, units, rng)?),
            LayerSpec::Dropout { ratio } => LayerNode::Dropout(Dropout::new(input.clone(), ratio)?),
            LayerSpec::Sigmoid => LayerNode::Sigmoid(Sigmoid::new(input.clone())),
        })
    }

    pub fn spec(&self) -> LayerSpec {
        dispatch!(self, l => l.spec())
    }

    pub fn kind(&self) -> LayerKind {
        self.spec().kind()
    }

    pub fn input_shape(&self) -> &Shape {
        dispatch!(self, l => l.input_shape())
    }

    pub fn output_shape(&self) -> &Shape {
        dispatch!(self, l => l.output_shape())
    }

    /// Forward pass that retains what backward needs.
    pub fn forward(&mut self, x: &Tensor<T>, mode: TrainMode, rng: &mut dyn RngCore) -> Result<Tensor<T>> {
        match self {
            LayerNode::Rescale(l) => l.forward(x),
            LayerNode::Conv2d(l) => l.forward(x),
            LayerNode::Relu(l) => l.forward(x),
            LayerNode::MaxPool2d(l) => l.forward(x),
            LayerNode::Flatten(l) => l.forward(x),
            LayerNode::Dense(l) => l.forward(x),
            LayerNode::Dropout(l) => l.forward(x, mode, rng),
            LayerNode::Sigmoid(l) => l.forward(x),
        }
    }

    /// Inference-mode forward pass that leaves the layer untouched.
    pub fn infer(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        dispatch!(self, l => l.infer(x))
    }

    /// Returns the gradient with respect to the input of the last forward
    /// call and accumulates parameter gradients.
    pub fn backward(&mut self, upstream: &Tensor<T>) -> Result<Tensor<T>> {
        dispatch!(self, l => l.backward(upstream))
    }

    pub fn params(&self) -> Vec<Param<'_, T>> {
        match self {
            LayerNode::Conv2d(l) => l.params(),
            LayerNode::Dense(l) => l.params(),
            _ => Vec::new(),
        }
    }

    pub fn params_mut(&mut self) -> Vec<ParamMut<'_, T>> {
        match self {
            LayerNode::Conv2d(l) => l.params_mut(),
            LayerNode::Dense(l) => l.params_mut(),
            _ => Vec::new(),
        }
    }

    /// Feeds the piecewise-linear branch choices of the last forward pass
    /// (ReLU signs, pooling winners) into `h`.
    pub(crate) fn branch_hash(&self, h: &mut impl std::hash::Hasher) {
        match self {
            LayerNode::Relu(l) => l.branch_hash(h),
            LayerNode::MaxPool2d(l) => l.branch_hash(h),
            _ => {}
        }
    }

    pub fn param_count(&self) -> usize {
        self.params().iter().map(|p| p.value.len()).sum()
    }

    pub fn zero_grad(&mut self) {
        match self {
            LayerNode::Conv2d(l) => l.zero_grad(),
            LayerNode::Dense(l) => l.zero_grad(),
            _ => {}
        }
    }
}

/// Checks `x` is `[n, ..per_sample]` and returns `n`.
pub(crate) fn batch_len<T: Scalar>(x: &Tensor<T>, per_sample: &Shape, layer: &str) -> Result<usize> {
    let dims = x.dims();
    if dims.len() != per_sample.rank() + 1 || &dims[1..] != per_sample.dims() {
        return Err(Error::shape(format!(
            "{layer} expects [n, {}], got {}",
            per_sample
                .dims()
                .iter()
                .map(|d| d.to_string())
                .collect::<Vec<_>>()
                .join(", "),
            x.shape()
        )));
    }
    Ok(dims[0])
}

/// Checks an upstream gradient against the cached forward output shape.
pub(crate) fn check_upstream<T: Scalar>(g: &Tensor<T>, out: &Shape, n: usize, layer: &str) -> Result<()> {
    let expected = out.with_batch(n)?;
    if g.shape() != &expected {
        return Err(Error::shape(format!(
            "{layer} backward expects gradient {expected}, got {}",
            g.shape()
        )));
    }
    Ok(())
}

pub(crate) fn no_forward(layer: &str) -> Error {
    Error::State(format!("{layer} backward called before forward"))
}

/// Glorot-uniform sample in `±sqrt(6 / (fan_in + fan_out))`.
pub(crate) fn glorot_uniform<T: Scalar>(
    shape: Shape,
    fan_in: usize,
    fan_out: usize,
    rng: &mut dyn RngCore,
) -> Tensor<T> {
    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let data = (0..shape.numel())
        .map(|_| T::from_f64(rng.gen_range(-limit..limit)))
        .collect();
    Tensor::from_shape_vec(shape, data).expect("length matches shape")
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn glorot_respects_limit() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let w: Tensor<f32> = glorot_uniform(Shape::new(vec![3, 3, 3, 32]).unwrap(), 27, 288, &mut rng);
        let limit = (6.0f32 / 315.0).sqrt();
        assert!(w.data().iter().all(|v| v.abs() <= limit));
        let mean = w.sum_all() / w.len() as f32;
        assert!(mean.abs() < 0.02);
    }

    #[test]
    fn spec_json_shape() {
        let json = serde_json::to_string(&LayerSpec::Conv2d {
            filters: 32,
            kernel: [3, 3],
        })
        .unwrap();
        assert_eq!(json, r#"{"kind":"conv2d","filters":32,"kernel":[3,3]}"#);
        let back: LayerSpec = serde_json::from_str(r#"{"kind":"dropout","ratio":0.5}"#).unwrap();
        assert_eq!(back, LayerSpec::Dropout { ratio: 0.5 });
    }

    #[test]
    fn backward_before_forward_is_state_error() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let input = Shape::new(vec![4, 4, 1]).unwrap();
        let specs = [
            LayerSpec::Rescale { divisor: 255.0 },
            LayerSpec::Conv2d {
                filters: 2,
                kernel: [3, 3],
            },
            LayerSpec::Relu,
            LayerSpec::MaxPool2d { pool: 2 },
            LayerSpec::Flatten,
            LayerSpec::Dropout { ratio: 0.5 },
            LayerSpec::Sigmoid,
        ];
        for spec in &specs {
            let mut layer = LayerNode::<f64>::from_spec(spec, &input, &mut rng).unwrap();
            let g = Tensor::zeros(layer.output_shape().with_batch(1).unwrap());
            assert!(matches!(layer.backward(&g), Err(Error::State(_))), "{spec:?}");
        }
        let flat = Shape::new(vec![3]).unwrap();
        let mut dense = LayerNode::<f64>::from_spec(&LayerSpec::Dense { units: 2 }, &flat, &mut rng).unwrap();
        let g = Tensor::zeros(Shape::new(vec![1, 2]).unwrap());
        assert!(matches!(dense.backward(&g), Err(Error::State(_))));
    }

    #[test]
    fn wrong_input_shape_is_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let input = Shape::new(vec![4, 4, 1]).unwrap();
        let mut relu = LayerNode::<f32>::from_spec(&LayerSpec::Relu, &input, &mut rng).unwrap();
        let x = Tensor::zeros(Shape::new(vec![1, 4, 4, 2]).unwrap());
        assert!(matches!(
            relu.forward(&x, TrainMode::Training, &mut rng),
            Err(Error::Shape(_))
        ));
    }
}
