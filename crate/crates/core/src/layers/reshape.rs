use rand::{Rng, RngCore};

use super::{batch_len, check_upstream, no_forward, LayerSpec, TrainMode};
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Shape, Tensor};

/// Row-major flattening of each sample to a vector.
#[derive(Debug, Clone)]
pub struct Flatten<T: Scalar> {
    input_shape: Shape,
    output_shape: Shape,
    batch: Option<usize>,
    _marker: std::marker::PhantomData<T>,
}

impl<T: Scalar> Flatten<T> {
    pub fn new(input: Shape) -> Self {
        let output_shape = Shape::new(vec![input.numel()]).expect("numel is positive");
        Flatten {
            input_shape: input,
            output_shape,
            batch: None,
            _marker: std::marker::PhantomData,
        }
    }

    pub fn spec(&self) -> LayerSpec {
        LayerSpec::Flatten
    }

    pub fn input_shape(&self) -> &Shape {
        &self.input_shape
    }

    pub fn output_shape(&self) -> &Shape {
        &self.output_shape
    }

    pub fn forward(&mut self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let y = self.infer(x)?;
        self.batch = Some(x.dims()[0]);
        Ok(y)
    }

    pub fn infer(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let n = batch_len(x, &self.input_shape, "flatten")?;
        x.clone().reshape(self.output_shape.with_batch(n)?)
    }

    pub fn backward(&mut self, g: &Tensor<T>) -> Result<Tensor<T>> {
        let n = self.batch.take().ok_or_else(|| no_forward("flatten"))?;
        check_upstream(g, &self.output_shape, n, "flatten")?;
        g.clone().reshape(self.input_shape.with_batch(n)?)
    }
}

/// Inverted dropout: in training mode each value is zeroed with probability
/// `ratio` and survivors are scaled by `1 / (1 - ratio)`. Inference is the
/// identity.
#[derive(Debug, Clone)]
pub struct Dropout<T: Scalar> {
    ratio: f64,
    shape: Shape,
    /// Per-element multiplier applied in the last forward pass.
    mask: Option<Vec<T>>,
}

impl<T: Scalar> Dropout<T> {
    pub fn new(shape: Shape, ratio: f64) -> Result<Self> {
        if !(0.0..1.0).contains(&ratio) {
            return Err(Error::Config(format!("dropout ratio must be in [0, 1), got {ratio}")));
        }
        Ok(Dropout {
            ratio,
            shape,
            mask: None,
        })
    }

    pub fn ratio(&self) -> f64 {
        self.ratio
    }

    pub fn spec(&self) -> LayerSpec {
        LayerSpec::Dropout { ratio: self.ratio }
    }

    pub fn input_shape(&self) -> &Shape {
        &self.shape
    }

    pub fn output_shape(&self) -> &Shape {
        &self.shape
    }

    pub fn forward(&mut self, x: &Tensor<T>, mode: TrainMode, rng: &mut dyn RngCore) -> Result<Tensor<T>> {
        batch_len(x, &self.shape, "dropout")?;
        let mask: Vec<T> = match mode {
            TrainMode::Training if self.ratio > 0.0 => {
                let keep = T::from_f64(1.0 / (1.0 - self.ratio));
                (0..x.len())
                    .map(|_| if rng.gen::<f64>() < self.ratio { T::zero() } else { keep })
                    .collect()
            }
            _ => vec![T::one(); x.len()],
        };
        let y = x.data().iter().zip(&mask).map(|(&v, &m)| v * m).collect();
        self.mask = Some(mask);
        Tensor::from_shape_vec(x.shape().clone(), y)
    }

    pub fn infer(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        batch_len(x, &self.shape, "dropout")?;
        Ok(x.clone())
    }

    pub fn backward(&mut self, g: &Tensor<T>) -> Result<Tensor<T>> {
        let mask = self.mask.take().ok_or_else(|| no_forward("dropout"))?;
        if g.len() != mask.len() {
            return Err(Error::shape(format!(
                "dropout backward expects {} values, got {}",
                mask.len(),
                g.len()
            )));
        }
        check_upstream(g, &self.shape, g.dims()[0], "dropout")?;
        let data = g.data().iter().zip(&mask).map(|(&v, &m)| v * m).collect();
        Tensor::from_shape_vec(g.shape().clone(), data)
    }
}
