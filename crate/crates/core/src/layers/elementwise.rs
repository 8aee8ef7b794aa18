use std::hash::Hasher;

use super::{batch_len, check_upstream, no_forward, LayerSpec};
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Shape, Tensor};

/// Divides every value by a constant; with divisor 255 this maps 8-bit pixel
/// intensities onto `[0, 1]`. Values are not clamped.
#[derive(Debug, Clone)]
pub struct Rescale<T: Scalar> {
    divisor: f64,
    shape: Shape,
    batch: Option<usize>,
    _marker: std::marker::PhantomData<T>,
}

impl<T: Scalar> Rescale<T> {
    pub fn new(shape: Shape, divisor: f64) -> Result<Self> {
        if !(divisor.is_finite() && divisor != 0.0) {
            return Err(Error::Config(format!("invalid rescale divisor {divisor}")));
        }
        Ok(Rescale {
            divisor,
            shape,
            batch: None,
            _marker: std::marker::PhantomData,
        })
    }

    pub fn spec(&self) -> LayerSpec {
        LayerSpec::Rescale { divisor: self.divisor }
    }

    pub fn input_shape(&self) -> &Shape {
        &self.shape
    }

    pub fn output_shape(&self) -> &Shape {
        &self.shape
    }

    pub fn forward(&mut self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let y = self.infer(x)?;
        self.batch = Some(x.dims()[0]);
        Ok(y)
    }

    pub fn infer(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        batch_len(x, &self.shape, "rescale")?;
        let d = T::from_f64(self.divisor);
        x.map(|v| v / d)
    }

    pub fn backward(&mut self, g: &Tensor<T>) -> Result<Tensor<T>> {
        let n = self.batch.take().ok_or_else(|| no_forward("rescale"))?;
        check_upstream(g, &self.shape, n, "rescale")?;
        let d = T::from_f64(self.divisor);
        g.map(|v| v / d)
    }
}

/// `max(x, 0)`; the derivative at exactly zero is taken as 0.
#[derive(Debug, Clone)]
pub struct Relu<T: Scalar> {
    shape: Shape,
    input: Option<Tensor<T>>,
}

impl<T: Scalar> Relu<T> {
    pub fn new(shape: Shape) -> Self {
        Relu { shape, input: None }
    }

    /// Which inputs of the last forward pass were active.
    pub(crate) fn branch_hash(&self, h: &mut impl Hasher) {
        if let Some(x) = &self.input {
            for v in x.data() {
                h.write_u8((*v > T::zero()) as u8);
            }
        }
    }

    pub fn spec(&self) -> LayerSpec {
        LayerSpec::Relu
    }

    pub fn input_shape(&self) -> &Shape {
        &self.shape
    }

    pub fn output_shape(&self) -> &Shape {
        &self.shape
    }

    pub fn forward(&mut self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let y = self.infer(x)?;
        self.input = Some(x.clone());
        Ok(y)
    }

    pub fn infer(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        batch_len(x, &self.shape, "relu")?;
        x.map(|v| if v > T::zero() { v } else { T::zero() })
    }

    pub fn backward(&mut self, g: &Tensor<T>) -> Result<Tensor<T>> {
        let x = self.input.take().ok_or_else(|| no_forward("relu"))?;
        check_upstream(g, &self.shape, x.dims()[0], "relu")?;
        let data = x
            .data()
            .iter()
            .zip(g.data())
            .map(|(&xv, &gv)| if xv > T::zero() { gv } else { T::zero() })
            .collect();
        Tensor::from_shape_vec(g.shape().clone(), data)
    }
}

/// Logistic function. Outputs are kept strictly inside `(0, 1)` even when
/// the exponential saturates.
#[derive(Debug, Clone)]
pub struct Sigmoid<T: Scalar> {
    shape: Shape,
    output: Option<Tensor<T>>,
}

pub(crate) fn sigmoid<T: Scalar>(x: T) -> T {
    let one = T::one();
    let y = if x >= T::zero() {
        one / (one + (-x).exp())
    } else {
        let e = x.exp();
        e / (one + e)
    };
    // largest value below 1 is 1 - eps/2
    let upper = one - T::epsilon() / (one + one);
    y.max(T::min_positive_value()).min(upper)
}

impl<T: Scalar> Sigmoid<T> {
    pub fn new(shape: Shape) -> Self {
        Sigmoid { shape, output: None }
    }

    pub fn spec(&self) -> LayerSpec {
        LayerSpec::Sigmoid
    }

    pub fn input_shape(&self) -> &Shape {
        &self.shape
    }

    pub fn output_shape(&self) -> &Shape {
        &self.shape
    }

    pub fn forward(&mut self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let y = self.infer(x)?;
        self.output = Some(y.clone());
        Ok(y)
    }

    pub fn infer(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        batch_len(x, &self.shape, "sigmoid")?;
        x.map(sigmoid)
    }

    pub fn backward(&mut self, g: &Tensor<T>) -> Result<Tensor<T>> {
        let y = self.output.take().ok_or_else(|| no_forward("sigmoid"))?;
        check_upstream(g, &self.shape, y.dims()[0], "sigmoid")?;
        let data = y
            .data()
            .iter()
            .zip(g.data())
            .map(|(&yv, &gv)| gv * yv * (T::one() - yv))
            .collect();
        Tensor::from_shape_vec(g.shape().clone(), data)
    }
}
