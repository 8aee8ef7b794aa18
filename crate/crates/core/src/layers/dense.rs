use rand::RngCore;

use super::{batch_len, check_upstream, glorot_uniform, no_forward, LayerSpec, Param, ParamMut};
use crate::error::{Error, Result};
use crate::tensor::{gemm_nn, gemm_tn, transpose_into, Scalar, Shape, Tensor};

/// Fully connected layer, `y = W^T x + b` with `W` stored as `[in, out]`.
#[derive(Debug, Clone)]
pub struct Dense<T: Scalar> {
    inputs: usize,
    units: usize,
    input_shape: Shape,
    output_shape: Shape,
    weight: Tensor<T>,
    bias: Tensor<T>,
    grad_weight: Tensor<T>,
    grad_bias: Tensor<T>,
    input: Option<Tensor<T>>,
}

impl<T: Scalar> Dense<T> {
    pub fn new(input: &Shape, units: usize, rng: &mut dyn RngCore) -> Result<Self> {
        let &[inputs] = input.dims() else {
            return Err(Error::shape(format!("dense expects a flat input, got {input}")));
        };
        if units == 0 {
            return Err(Error::Config("dense needs at least one unit".into()));
        }
        let wshape = Shape::new(vec![inputs, units])?;
        let bshape = Shape::new(vec![units])?;
        Ok(Dense {
            inputs,
            units,
            input_shape: input.clone(),
            output_shape: bshape.clone(),
            weight: glorot_uniform(wshape.clone(), inputs, units, rng),
            bias: Tensor::zeros(bshape.clone()),
            grad_weight: Tensor::zeros(wshape),
            grad_bias: Tensor::zeros(bshape),
            input: None,
        })
    }

    pub fn spec(&self) -> LayerSpec {
        LayerSpec::Dense { units: self.units }
    }

    pub fn input_shape(&self) -> &Shape {
        &self.input_shape
    }

    pub fn output_shape(&self) -> &Shape {
        &self.output_shape
    }

    pub fn weight(&self) -> &Tensor<T> {
        &self.weight
    }

    pub fn bias(&self) -> &Tensor<T> {
        &self.bias
    }

    pub fn forward(&mut self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let y = self.infer(x)?;
        self.input = Some(x.clone());
        Ok(y)
    }

    pub fn infer(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let n = batch_len(x, &self.input_shape, "dense")?;
        let mut out = Vec::with_capacity(n * self.units);
        for _ in 0..n {
            out.extend_from_slice(self.bias.data());
        }
        gemm_nn(x.data(), self.weight.data(), &mut out, self.inputs, self.units);
        Tensor::from_vec(&[n, self.units], out)
    }

    pub fn backward(&mut self, g: &Tensor<T>) -> Result<Tensor<T>> {
        let x = self.input.take().ok_or_else(|| no_forward("dense"))?;
        let n = x.dims()[0];
        check_upstream(g, &self.output_shape, n, "dense")?;

        gemm_tn(x.data(), g.data(), self.grad_weight.data_mut(), self.inputs, self.units);
        for row in g.data().chunks_exact(self.units) {
            for (d, &v) in self.grad_bias.data_mut().iter_mut().zip(row) {
                *d += v;
            }
        }

        let mut w_t = vec![T::zero(); self.inputs * self.units];
        transpose_into(self.weight.data(), &mut w_t, self.inputs, self.units);
        let mut dx = vec![T::zero(); n * self.inputs];
        gemm_nn(g.data(), &w_t, &mut dx, self.units, self.inputs);
        Tensor::from_vec(&[n, self.inputs], dx)
    }

    pub fn params(&self) -> Vec<Param<'_, T>> {
        vec![
            Param {
                name: "W",
                value: &self.weight,
                grad: &self.grad_weight,
            },
            Param {
                name: "b",
                value: &self.bias,
                grad: &self.grad_bias,
            },
        ]
    }

    pub fn params_mut(&mut self) -> Vec<ParamMut<'_, T>> {
        vec![
            ParamMut {
                name: "W",
                value: &mut self.weight,
                grad: &self.grad_weight,
            },
            ParamMut {
                name: "b",
                value: &mut self.bias,
                grad: &self.grad_bias,
            },
        ]
    }

    pub fn zero_grad(&mut self) {
        self.grad_weight.fill(T::zero());
        self.grad_bias.fill(T::zero());
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn dense(inputs: usize, units: usize) -> Dense<f32> {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        Dense::new(&Shape::new(vec![inputs]).unwrap(), units, &mut rng).unwrap()
    }

    #[test]
    fn blood_cell_param_counts() {
        let d1 = dense(2560, 64);
        assert_eq!(d1.weight().len() + d1.bias().len(), 163904);
        let d2 = dense(64, 2);
        assert_eq!(d2.weight().len() + d2.bias().len(), 130);
    }

    #[test]
    fn identity_weights() {
        let mut d = dense(2, 2);
        d.weight.data_mut().copy_from_slice(&[1.0, 0.0, 0.0, 1.0]);
        let x = Tensor::from_vec(&[1, 2], vec![1.0, 2.0]).unwrap();
        assert_eq!(d.forward(&x).unwrap().data(), &[1.0, 2.0]);
    }

    #[test]
    fn backward_formulas() {
        let mut d = dense(3, 2);
        d.weight.data_mut().copy_from_slice(&[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let x = Tensor::from_vec(&[1, 3], vec![1.0, -1.0, 2.0]).unwrap();
        d.forward(&x).unwrap();
        let g = Tensor::from_vec(&[1, 2], vec![0.5, -1.0]).unwrap();
        let dx = d.backward(&g).unwrap();
        // dx = W g
        assert_eq!(dx.data(), &[1.0 * 0.5 - 2.0, 3.0 * 0.5 - 4.0, 5.0 * 0.5 - 6.0]);
        // dW = x g^T
        assert_eq!(d.grad_weight.data(), &[0.5, -1.0, -0.5, 1.0, 1.0, -2.0]);
        assert_eq!(d.grad_bias.data(), &[0.5, -1.0]);
    }

    #[test]
    fn length_mismatch() {
        let d = dense(4, 2);
        let x = Tensor::zeros(Shape::new(vec![1, 3]).unwrap());
        assert!(matches!(d.infer(&x), Err(Error::Shape(_))));
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(Dense::<f32>::new(&Shape::new(vec![2, 2]).unwrap(), 2, &mut rng).is_err());
    }
}
