use rand::RngCore;
use rayon::prelude::*;

use super::{batch_len, check_upstream, glorot_uniform, no_forward, LayerSpec, Param, ParamMut};
use crate::error::{Error, Result};
use crate::tensor::{gemm_nn, gemm_tn, transpose_into, ConvGeometry, Scalar, Shape, Tensor};

/// 2-D convolution, stride 1, no padding, channel-last.
///
/// The kernel is stored as `[kh, kw, c_in, c_out]`, which flattened is the
/// `[kh * kw * c_in, c_out]` matrix that multiplies an im2col patch row.
#[derive(Debug, Clone)]
pub struct Conv2d<T: Scalar> {
    geom: ConvGeometry,
    filters: usize,
    input_shape: Shape,
    output_shape: Shape,
    weight: Tensor<T>,
    bias: Tensor<T>,
    grad_weight: Tensor<T>,
    grad_bias: Tensor<T>,
    input: Option<Tensor<T>>,
}

impl<T: Scalar> Conv2d<T> {
    pub fn new(input: &Shape, filters: usize, kernel: [usize; 2], rng: &mut dyn RngCore) -> Result<Self> {
        let &[h, w, c] = input.dims() else {
            return Err(Error::shape(format!("conv2d expects [h, w, c] input, got {input}")));
        };
        if filters == 0 {
            return Err(Error::Config("conv2d needs at least one filter".into()));
        }
        let geom = ConvGeometry::new(h, w, c, kernel, 1)?;
        let [kh, kw] = kernel;
        let wshape = Shape::new(vec![kh, kw, c, filters])?;
        let bshape = Shape::new(vec![filters])?;
        let weight = glorot_uniform(wshape.clone(), kh * kw * c, kh * kw * filters, rng);
        Ok(Conv2d {
            geom,
            filters,
            input_shape: input.clone(),
            output_shape: Shape::new(vec![geom.out_h, geom.out_w, filters])?,
            weight,
            bias: Tensor::zeros(bshape.clone()),
            grad_weight: Tensor::zeros(wshape),
            grad_bias: Tensor::zeros(bshape),
            input: None,
        })
    }

    pub fn spec(&self) -> LayerSpec {
        LayerSpec::Conv2d {
            filters: self.filters,
            kernel: [self.geom.kh, self.geom.kw],
        }
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
        let n = batch_len(x, &self.input_shape, "conv2d")?;
        let in_len = self.input_shape.numel();
        let out_len = self.output_shape.numel();
        let cols_len = self.geom.patches() * self.geom.patch_len();
        let mut out = vec![T::zero(); n * out_len];
        out.par_chunks_mut(out_len)
            .zip(x.data().par_chunks(in_len))
            .for_each_init(
                || vec![T::zero(); cols_len],
                |cols, (y, xs)| {
                    self.geom.im2col(xs, cols);
                    for row in y.chunks_exact_mut(self.filters) {
                        row.copy_from_slice(self.bias.data());
                    }
                    gemm_nn(cols, self.weight.data(), y, self.geom.patch_len(), self.filters);
                },
            );
        Tensor::from_shape_vec(self.output_shape.with_batch(n)?, out)
    }

    pub fn backward(&mut self, g: &Tensor<T>) -> Result<Tensor<T>> {
        let x = self.input.take().ok_or_else(|| no_forward("conv2d"))?;
        let n = x.dims()[0];
        check_upstream(g, &self.output_shape, n, "conv2d")?;

        let geom = self.geom;
        let k = geom.patch_len();
        let f = self.filters;
        let in_len = self.input_shape.numel();
        let out_len = self.output_shape.numel();

        let mut w_t = vec![T::zero(); k * f];
        transpose_into(self.weight.data(), &mut w_t, k, f);

        let mut dx = vec![T::zero(); n * in_len];
        // Per-sample parameter gradients are summed afterwards in sample order
        // so the result does not depend on thread scheduling.
        let per_sample: Vec<(Vec<T>, Vec<T>)> = dx
            .par_chunks_mut(in_len)
            .zip(x.data().par_chunks(in_len))
            .zip(g.data().par_chunks(out_len))
            .map_init(
                || (vec![T::zero(); geom.patches() * k], vec![T::zero(); geom.patches() * k]),
                |(cols, dcols), ((dx_s, x_s), g_s)| {
                    geom.im2col(x_s, cols);
                    let mut dw = vec![T::zero(); k * f];
                    gemm_tn(cols, g_s, &mut dw, k, f);
                    let mut db = vec![T::zero(); f];
                    for row in g_s.chunks_exact(f) {
                        for (d, &v) in db.iter_mut().zip(row) {
                            *d += v;
                        }
                    }
                    dcols.iter_mut().for_each(|v| *v = T::zero());
                    gemm_nn(g_s, &w_t, dcols, f, k);
                    geom.col2im(dcols, dx_s);
                    (dw, db)
                },
            )
            .collect();

        for (dw, db) in &per_sample {
            for (a, &b) in self.grad_weight.data_mut().iter_mut().zip(dw) {
                *a += b;
            }
            for (a, &b) in self.grad_bias.data_mut().iter_mut().zip(db) {
                *a += b;
            }
        }
        Tensor::from_shape_vec(x.shape().clone(), dx)
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

    fn conv(input: &[usize], filters: usize) -> Conv2d<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        Conv2d::new(&Shape::new(input.to_vec()).unwrap(), filters, [3, 3], &mut rng).unwrap()
    }

    #[test]
    fn blood_cell_shapes_and_param_counts() {
        let c1 = conv(&[120, 160, 3], 32);
        assert_eq!(c1.output_shape().dims(), &[118, 158, 32]);
        assert_eq!(c1.weight().len() + c1.bias().len(), 896);
        let c3 = conv(&[28, 38, 32], 32);
        assert_eq!(c3.output_shape().dims(), &[26, 36, 32]);
        assert_eq!(c3.weight().len() + c3.bias().len(), 9248);
    }

    #[test]
    fn all_ones_window_sums_to_nine() {
        let mut c = conv(&[3, 3, 1], 1);
        c.weight.fill(1.0);
        let x = Tensor::full(&[1, 3, 3, 1], 1.0).unwrap();
        let y = c.forward(&x).unwrap();
        assert_eq!(y.dims(), &[1, 1, 1, 1]);
        assert_eq!(y.data(), &[9.0]);
    }

    #[test]
    fn forward_matches_formula() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut c = conv(&[5, 4, 2], 3);
        for v in c.bias.data_mut() {
            *v = rand::Rng::gen_range(&mut rng, -1.0..1.0);
        }
        let x_data: Vec<f64> = (0..2 * 5 * 4 * 2)
            .map(|_| rand::Rng::gen_range(&mut rng, -1.0..1.0))
            .collect();
        let x = Tensor::from_vec(&[2, 5, 4, 2], x_data).unwrap();
        let y = c.infer(&x).unwrap();
        let (w, b) = (c.weight.data(), c.bias.data());
        for s in 0..2 {
            for i in 0..3 {
                for j in 0..2 {
                    for o in 0..3 {
                        let mut acc = b[o];
                        for di in 0..3 {
                            for dj in 0..3 {
                                for ci in 0..2 {
                                    acc += w[((di * 3 + dj) * 2 + ci) * 3 + o]
                                        * x.data()[s * 40 + ((i + di) * 4 + j + dj) * 2 + ci];
                                }
                            }
                        }
                        let got = y.data()[s * 18 + (i * 2 + j) * 3 + o];
                        assert!((got - acc).abs() < 1e-12);
                    }
                }
            }
        }
    }

    #[test]
    fn zero_upstream_gives_zero_gradients() {
        let mut c = conv(&[6, 6, 2], 3);
        let x = Tensor::full(&[2, 6, 6, 2], 0.3).unwrap();
        c.forward(&x).unwrap();
        let dx = c
            .backward(&Tensor::zeros(Shape::new(vec![2, 4, 4, 3]).unwrap()))
            .unwrap();
        assert!(dx.data().iter().all(|&v| v == 0.0));
        assert!(c.grad_weight.data().iter().all(|&v| v == 0.0));
        assert!(c.grad_bias.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn single_output_pixel_bias_gradient_is_upstream() {
        let mut c = conv(&[3, 3, 1], 1);
        let x = Tensor::full(&[1, 3, 3, 1], 2.0).unwrap();
        c.forward(&x).unwrap();
        c.backward(&Tensor::full(&[1, 1, 1, 1], 0.7).unwrap()).unwrap();
        assert_eq!(c.grad_bias.data(), &[0.7]);
        assert!(c.grad_weight.data().iter().all(|&v| (v - 1.4).abs() < 1e-12));
    }

    #[test]
    fn gradients_accumulate_until_zeroed() {
        let mut c = conv(&[3, 3, 1], 1);
        let x = Tensor::full(&[1, 3, 3, 1], 1.0).unwrap();
        let g = Tensor::full(&[1, 1, 1, 1], 1.0).unwrap();
        for _ in 0..2 {
            c.forward(&x).unwrap();
            c.backward(&g).unwrap();
        }
        assert_eq!(c.grad_bias.data(), &[2.0]);
        c.zero_grad();
        assert_eq!(c.grad_bias.data(), &[0.0]);
    }

    #[test]
    fn input_too_small_or_wrong_channels() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let small = Shape::new(vec![2, 5, 1]).unwrap();
        assert!(matches!(
            Conv2d::<f32>::new(&small, 4, [3, 3], &mut rng),
            Err(Error::Shape(_))
        ));
        let c = conv(&[4, 4, 3], 2);
        let x = Tensor::zeros(Shape::new(vec![1, 4, 4, 2]).unwrap());
        assert!(matches!(c.infer(&x), Err(Error::Shape(_))));
    }
}
