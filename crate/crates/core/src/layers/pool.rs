use std::hash::{Hash, Hasher};

use super::{batch_len, check_upstream, no_forward, LayerSpec};
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Shape, Tensor};

/// Max pooling over disjoint `pool x pool` windows (stride = pool size).
///
/// Trailing rows and columns that do not fill a whole window are dropped, so
/// an input of height 57 pools to 28. Ties resolve to the first maximum in
/// row-major window order.
#[derive(Debug, Clone)]
pub struct MaxPool2d<T: Scalar> {
    pool: usize,
    input_shape: Shape,
    output_shape: Shape,
    /// Per output element, the flat index of its argmax within the batch input.
    argmax: Option<(usize, Vec<usize>)>,
    _marker: std::marker::PhantomData<T>,
}

impl<T: Scalar> MaxPool2d<T> {
    /// Winning positions of the last forward pass.
    pub(crate) fn branch_hash(&self, h: &mut impl Hasher) {
        if let Some((_, idx)) = &self.argmax {
            idx.hash(h);
        }
    }

    pub fn new(input: &Shape, pool: usize) -> Result<Self> {
        let &[h, w, c] = input.dims() else {
            return Err(Error::shape(format!("max_pool2d expects [h, w, c] input, got {input}")));
        };
        if pool == 0 {
            return Err(Error::Config("pool size must be positive".into()));
        }
        if h < pool || w < pool {
            return Err(Error::shape(format!(
                "max_pool2d window {pool}x{pool} does not fit input {h}x{w}"
            )));
        }
        Ok(MaxPool2d {
            pool,
            input_shape: input.clone(),
            output_shape: Shape::new(vec![h / pool, w / pool, c])?,
            argmax: None,
            _marker: std::marker::PhantomData,
        })
    }

    pub fn spec(&self) -> LayerSpec {
        LayerSpec::MaxPool2d { pool: self.pool }
    }

    pub fn input_shape(&self) -> &Shape {
        &self.input_shape
    }

    pub fn output_shape(&self) -> &Shape {
        &self.output_shape
    }

    fn run(&self, x: &Tensor<T>, mut record: Option<&mut Vec<usize>>) -> Result<Tensor<T>> {
        let n = batch_len(x, &self.input_shape, "max_pool2d")?;
        let (w, c) = (self.input_shape.dims()[1], self.input_shape.dims()[2]);
        let (oh, ow) = (self.output_shape.dims()[0], self.output_shape.dims()[1]);
        let p = self.pool;
        let in_len = self.input_shape.numel();
        let data = x.data();
        let mut out = Vec::with_capacity(n * self.output_shape.numel());
        for s in 0..n {
            let base = s * in_len;
            for oi in 0..oh {
                for oj in 0..ow {
                    for ch in 0..c {
                        let mut best_idx = base + ((oi * p) * w + oj * p) * c + ch;
                        let mut best = data[best_idx];
                        for di in 0..p {
                            for dj in 0..p {
                                let idx = base + ((oi * p + di) * w + oj * p + dj) * c + ch;
                                // strict comparison keeps the first maximum
                                if data[idx] > best {
                                    best = data[idx];
                                    best_idx = idx;
                                }
                            }
                        }
                        out.push(best);
                        if let Some(rec) = record.as_deref_mut() {
                            rec.push(best_idx);
                        }
                    }
                }
            }
        }
        Tensor::from_shape_vec(self.output_shape.with_batch(n)?, out)
    }

    pub fn forward(&mut self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let mut idx = Vec::new();
        let y = self.run(x, Some(&mut idx))?;
        self.argmax = Some((x.dims()[0], idx));
        Ok(y)
    }

    pub fn infer(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        self.run(x, None)
    }

    pub fn backward(&mut self, g: &Tensor<T>) -> Result<Tensor<T>> {
        let (n, argmax) = self.argmax.take().ok_or_else(|| no_forward("max_pool2d"))?;
        check_upstream(g, &self.output_shape, n, "max_pool2d")?;
        let mut dx = vec![T::zero(); n * self.input_shape.numel()];
        for (&idx, &gv) in argmax.iter().zip(g.data()) {
            dx[idx] += gv;
        }
        Tensor::from_shape_vec(self.input_shape.with_batch(n)?, dx)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn pool(dims: &[usize]) -> MaxPool2d<f64> {
        MaxPool2d::new(&Shape::new(dims.to_vec()).unwrap(), 2).unwrap()
    }

    #[test]
    fn blood_cell_pool_shapes() {
        assert_eq!(pool(&[118, 158, 32]).output_shape().dims(), &[59, 79, 32]);
        assert_eq!(pool(&[57, 77, 32]).output_shape().dims(), &[28, 38, 32]);
        assert_eq!(pool(&[11, 16, 64]).output_shape().dims(), &[5, 8, 64]);
    }

    #[test]
    fn max_of_window_and_argmax_routing() {
        let mut p = pool(&[2, 2, 1]);
        let x = Tensor::from_vec(&[1, 2, 2, 1], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(p.forward(&x).unwrap().data(), &[4.0]);
        let dx = p.backward(&Tensor::full(&[1, 1, 1, 1], 1.0).unwrap()).unwrap();
        assert_eq!(dx.data(), &[0.0, 0.0, 0.0, 1.0]);
    }

    #[test]
    fn ties_route_to_first_occurrence() {
        let mut p = pool(&[2, 2, 1]);
        let x = Tensor::from_vec(&[1, 2, 2, 1], vec![5.0, 5.0, 0.0, 0.0]).unwrap();
        p.forward(&x).unwrap();
        let dx = p.backward(&Tensor::full(&[1, 1, 1, 1], 1.0).unwrap()).unwrap();
        assert_eq!(dx.data(), &[1.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn dropped_border_gets_zero_gradient() {
        let mut p = pool(&[3, 3, 1]);
        let x = Tensor::from_vec(&[1, 3, 3, 1], vec![0.0, 0.0, 9.0, 0.0, 1.0, 9.0, 9.0, 9.0, 9.0]).unwrap();
        assert_eq!(p.forward(&x).unwrap().data(), &[1.0]);
        let dx = p.backward(&Tensor::full(&[1, 1, 1, 1], 2.0).unwrap()).unwrap();
        assert_eq!(dx.data(), &[0.0, 0.0, 0.0, 0.0, 2.0, 0.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn too_small_input() {
        assert!(matches!(
            MaxPool2d::<f32>::new(&Shape::new(vec![1, 4, 2]).unwrap(), 2),
            Err(Error::Shape(_))
        ));
    }

    proptest! {
        #[test]
        fn gradient_is_conserved_for_even_dims(h in 1usize..5, w in 1usize..5, c in 1usize..4, seed in 0u64..1000) {
            let (h, w) = (2 * h, 2 * w);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut p = pool(&[h, w, c]);
            let x = Tensor::from_vec(&[2, h, w, c], (0..2 * h * w * c).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
            let y = p.forward(&x).unwrap();
            let g = Tensor::from_vec(y.dims(), (0..y.len()).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
            let dx = p.backward(&g).unwrap();
            prop_assert!((dx.sum_all() - g.sum_all()).abs() < 1e-12);
        }
    }
}
