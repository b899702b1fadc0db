//! Loss heads: each returns the scalar loss together with the gradient
//! w.r.t. the network output, ready to feed into `backward`.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Array;

/// Softmax cross-entropy over logits `[n, k]` with integer class targets,
/// averaged over the batch.
pub fn softmax_cross_entropy<T: Scalar>(
    logits: &Array<T>,
    targets: &[usize],
) -> Result<(T, Array<T>)> {
    let s = logits.shape();
    if s.len() != 2 || s[0] != targets.len() {
        return Err(Error::InvalidArgument(format!(
            "logits {s:?} incompatible with {} targets",
            targets.len()
        )));
    }
    let (n, k) = (s[0], s[1]);
    let inv_n = T::of64(1.0 / n as f64);
    let mut grad = Array::zeros(s);
    let mut loss = T::zero();
    let lv = logits.values();
    let gv = grad.values_mut();
    for i in 0..n {
        if targets[i] >= k {
            return Err(Error::InvalidArgument(format!(
                "target {} out of range for {k} classes",
                targets[i]
            )));
        }
        let row = &lv[i * k..(i + 1) * k];
        let max = row.iter().cloned().fold(row[0], T::max);
        let mut denom = T::zero();
        for v in row {
            denom += (*v - max).exp();
        }
        let log_denom = denom.ln() + max;
        loss += (log_denom - row[targets[i]]) * inv_n;
        for j in 0..k {
            let p = (row[j] - log_denom).exp();
            let y = if j == targets[i] { T::one() } else { T::zero() };
            gv[i * k + j] = (p - y) * inv_n;
        }
    }
    Ok((loss, grad))
}

/// Softmax probabilities per row of `[n, k]` logits.
pub fn class_probabilities<T: Scalar>(logits: &Array<T>) -> Result<Array<T>> {
    let s = logits.shape();
    if s.len() != 2 {
        return Err(Error::InvalidArgument(format!("logits must be [n, k], got {s:?}")));
    }
    let (n, k) = (s[0], s[1]);
    let mut out = Array::zeros(s);
    let lv = logits.values();
    let ov = out.values_mut();
    for i in 0..n {
        let row = &lv[i * k..(i + 1) * k];
        let max = row.iter().cloned().fold(row[0], T::max);
        let mut denom = T::zero();
        for v in row {
            denom += (*v - max).exp();
        }
        for j in 0..k {
            ov[i * k + j] = (row[j] - max).exp() / denom;
        }
    }
    Ok(out)
}

/// Mean squared error between fixed targets and the Q-values of the
/// selected actions: `mean_i (target_i - q[i, a_i])^2`. The gradient is
/// zero everywhere except the selected entries.
pub fn selected_squared_error<T: Scalar>(
    q: &Array<T>,
    actions: &[usize],
    targets: &[T],
) -> Result<(T, Array<T>)> {
    let s = q.shape();
    if s.len() != 2 || s[0] != actions.len() || s[0] != targets.len() {
        return Err(Error::InvalidArgument(format!(
            "q-values {s:?} incompatible with {} actions / {} targets",
            actions.len(),
            targets.len()
        )));
    }
    let (n, k) = (s[0], s[1]);
    let inv_n = T::of64(1.0 / n as f64);
    let mut grad = Array::zeros(s);
    let mut loss = T::zero();
    let qv = q.values();
    let gv = grad.values_mut();
    for i in 0..n {
        if actions[i] >= k {
            return Err(Error::InvalidArgument(format!(
                "action {} out of range for {k} outputs",
                actions[i]
            )));
        }
        let diff = targets[i] - qv[i * k + actions[i]];
        loss += diff * diff * inv_n;
        gv[i * k + actions[i]] = -T::of64(2.0) * diff * inv_n;
    }
    Ok((loss, grad))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cross_entropy_matches_hand_values() {
        // Single sample, logits [0, 0]: loss = ln 2, grad = [1/2, -1/2].
        let logits = Array::from_vec(&[1, 2], vec![0.0f64, 0.0]).unwrap();
        let (loss, grad) = softmax_cross_entropy(&logits, &[1]).unwrap();
        assert!((loss - std::f64::consts::LN_2).abs() < 1e-12);
        assert!((grad.values()[0] - 0.5).abs() < 1e-12);
        assert!((grad.values()[1] + 0.5).abs() < 1e-12);
    }

    #[test]
    fn cross_entropy_gradient_vanishes_at_one_hot() {
        let logits = Array::from_vec(&[1, 2], vec![25.0f64, -25.0]).unwrap();
        let (loss, grad) = softmax_cross_entropy(&logits, &[0]).unwrap();
        assert!(loss < 1e-6);
        let norm: f64 = grad.values().iter().map(|g| g * g).sum::<f64>().sqrt();
        assert!(norm < 1e-6);
    }

    #[test]
    fn selected_squared_error_matches_hand_values() {
        // target 2.8, q = 0 at the chosen action: squared error 7.84.
        let q = Array::from_vec(&[1, 3], vec![0.0f64, 5.0, -1.0]).unwrap();
        let (loss, grad) = selected_squared_error(&q, &[0], &[2.8]).unwrap();
        assert!((loss - 7.84).abs() < 1e-12);
        assert!((grad.values()[0] - (-5.6)).abs() < 1e-12);
        assert_eq!(grad.values()[1], 0.0);
    }
}
