use crate::error::{Error, Result};

use super::{Scalar, Tensor};

pub const PROB_CLAMP: f64 = 1e-7;

/// Mean categorical cross-entropy of softmax outputs `probs` against
/// (possibly soft) `targets`, both `N × K`.
///
/// Returns the loss and its gradient with respect to the pre-softmax
/// logits, `(p - t) / N`.
pub fn categorical_crossentropy<T: Scalar>(
    probs: &Tensor<T>,
    targets: &Tensor<T>,
) -> Result<(f64, Tensor<T>)> {
    let (n, k) = probs.dims2()?;
    if targets.shape() != probs.shape() {
        return Err(Error::Shape(format!(
            "targets {:?} do not match probabilities {:?}",
            targets.shape(),
            probs.shape()
        )));
    }
    if n == 0 {
        return Err(Error::Empty("cross-entropy over an empty batch".into()));
    }
    let mut loss = 0.0f64;
    for (p, t) in probs.data().iter().zip(targets.data()) {
        let p = p.to_f64().unwrap().clamp(PROB_CLAMP, 1.0 - PROB_CLAMP);
        loss -= t.to_f64().unwrap() * p.ln();
    }
    let inv_n = T::lit(1.0 / n as f64);
    let grad: Vec<T> = probs
        .data()
        .iter()
        .zip(targets.data())
        .map(|(&p, &t)| (p - t) * inv_n)
        .collect();
    Ok((loss / n as f64, Tensor::from_vec(&[n, k], grad)?))
}

/// One-hot rows for integer labels.
pub fn one_hot<T: Scalar>(labels: &[usize], classes: usize) -> Result<Tensor<T>> {
    let mut t = Tensor::zeros(&[labels.len(), classes]);
    for (i, &l) in labels.iter().enumerate() {
        if l >= classes {
            return Err(Error::InvalidArgument(format!("label {l} outside 0..{classes}")));
        }
        t.data_mut()[i * classes + l] = T::one();
    }
    Ok(t)
}
