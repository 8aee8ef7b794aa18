use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Predictions are clamped to `[PROBABILITY_CLAMP, 1 - PROBABILITY_CLAMP]`
/// before taking logarithms.
pub const PROBABILITY_CLAMP: f64 = 1e-7;

#[derive(Debug, Clone)]
pub struct LossResult<T: Scalar> {
    pub value: f64,
    /// Gradient of `value` with respect to the predictions.
    pub grad: Tensor<T>,
}

fn rows<T: Scalar>(t: &Tensor<T>, what: &str) -> Result<(usize, usize)> {
    match t.dims() {
        &[n, k] => Ok((n, k)),
        d => Err(Error::shape(format!("{what} must be [batch, classes], got {d:?}"))),
    }
}

fn check_pair<T: Scalar>(pred: &Tensor<T>, targets: &Tensor<T>) -> Result<(usize, usize)> {
    let (n, k) = rows(pred, "predictions")?;
    if pred.shape() != targets.shape() {
        return Err(Error::shape(format!(
            "predictions {} and targets {} differ",
            pred.shape(),
            targets.shape()
        )));
    }
    Ok((n, k))
}

/// Binary cross entropy averaged over the batch and over every output.
///
/// Each output column is an independent Bernoulli probability; target rows
/// must be one-hot.
pub fn bce_loss<T: Scalar>(pred: &Tensor<T>, targets: &Tensor<T>) -> Result<LossResult<T>> {
    let (n, k) = check_pair(pred, targets)?;
    for (i, row) in targets.data().chunks_exact(k).enumerate() {
        let ones = row.iter().filter(|&&v| v == T::one()).count();
        let zeros = row.iter().filter(|&&v| v == T::zero()).count();
        if ones != 1 || ones + zeros != k {
            return Err(Error::Data(format!("target row {i} is not one-hot")));
        }
    }
    let lo = T::from_f64(PROBABILITY_CLAMP);
    let hi = T::one() - lo;
    let scale = T::from_f64(1.0 / (n * k) as f64);
    let mut value = 0.0f64;
    let mut grad = Vec::with_capacity(n * k);
    for (&p, &t) in pred.data().iter().zip(targets.data()) {
        let p = p.max(lo).min(hi);
        let (pf, tf) = (p.to_f64(), t.to_f64());
        value -= tf * pf.ln() + (1.0 - tf) * (1.0 - pf).ln();
        grad.push((p - t) / (p * (T::one() - p)) * scale);
    }
    let value = value / (n * k) as f64;
    if !value.is_finite() {
        return Err(Error::Numeric("binary cross entropy is not finite".into()));
    }
    Ok(LossResult {
        value,
        grad: Tensor::from_shape_vec(pred.shape().clone(), grad)?,
    })
}

/// `0.5 * sum((y - t)^2)` over every element. Used for gradient checks of
/// layers whose output is not a probability.
pub fn squared_error<T: Scalar>(y: &Tensor<T>, targets: &Tensor<T>) -> Result<LossResult<T>> {
    if y.shape() != targets.shape() {
        return Err(Error::shape(format!(
            "outputs {} and targets {} differ",
            y.shape(),
            targets.shape()
        )));
    }
    let diff = y.sub(targets)?;
    let value = 0.5 * diff.data().iter().map(|&v| Scalar::to_f64(v).powi(2)).sum::<f64>();
    Ok(LossResult { value, grad: diff })
}

/// Index of the largest value; ties go to the lower index.
pub fn argmax<T: Scalar>(row: &[T]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Fraction of rows whose prediction argmax equals the target argmax.
pub fn accuracy<T: Scalar>(pred: &Tensor<T>, targets: &Tensor<T>) -> Result<f64> {
    let (n, k) = check_pair(pred, targets)?;
    if n == 0 {
        return Err(Error::Data("accuracy of an empty batch is undefined".into()));
    }
    let correct = pred
        .data()
        .chunks_exact(k)
        .zip(targets.data().chunks_exact(k))
        .filter(|(p, t)| argmax(p) == argmax(t))
        .count();
    Ok(correct as f64 / n as f64)
}
