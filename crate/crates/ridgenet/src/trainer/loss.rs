//! Classification loss: cross-entropy plus a Frobenius-norm penalty on the
//! head weight matrix.

use crate::error::{Error, Result};
use crate::tensor::ops;
use crate::tensor::{Element, Tensor};

/// One-hot label distributions `[B, C]` for a batch of class indices.
pub fn one_hot<E: Element>(labels: &[usize], num_classes: usize) -> Result<Tensor<E>> {
    if labels.is_empty() {
        return Err(Error::invalid("one_hot needs at least one label".to_string()));
    }
    let mut data = vec![E::zero(); labels.len() * num_classes];
    for (i, &c) in labels.iter().enumerate() {
        if c >= num_classes {
            return Err(Error::invalid(format!(
                "label {c} is outside the class range 0..{num_classes}"
            )));
        }
        data[i * num_classes + c] = E::one();
    }
    Tensor::from_vec(&[labels.len(), num_classes], data)
}

/// Mean over the batch of `-sum_i p_i log(max(q_i, 1e-12))`, where `q` are
/// predicted probabilities and `p` reference distributions.
pub fn cross_entropy<E: Element>(q: &Tensor<E>, p: &Tensor<E>) -> Result<Tensor<E>> {
    ops::nll_mean(q, p)
}

/// Total training loss: `cross_entropy(softmax(logits), labels) +
/// lambda1 * ||w_head||_F^2`.
///
/// The regularizer's gradient with respect to the head weights is exactly
/// `2 * lambda1 * w_head`.
pub fn total_loss<E: Element>(
    logits: &Tensor<E>,
    labels: &Tensor<E>,
    w_head: &Tensor<E>,
    lambda1: f64,
) -> Result<Tensor<E>> {
    if lambda1 < 0.0 {
        return Err(Error::invalid(format!(
            "lambda1 must be nonnegative, got {lambda1}"
        )));
    }
    let ce = cross_entropy(&ops::softmax(logits)?, labels)?;
    if lambda1 == 0.0 {
        return Ok(ce);
    }
    let frob_sq = ops::sum(&ops::mul(w_head, w_head)?)?;
    ops::add(&ce, &ops::scale(&frob_sq, E::from_f64(lambda1)))
}
