//! Softmax head and soft-target categorical cross-entropy.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Probabilities are clamped to this floor before taking the log.
pub const PROB_FLOOR: f64 = 1e-12;

/// Tolerance for a target row to count as a probability distribution.
pub const SIMPLEX_TOL: f64 = 1e-6;

fn rows_cols<T>(op: &'static str, t: &Tensor<T>) -> Result<(usize, usize)>
where
    T: Scalar,
{
    match t.shape() {
        &[r, c] => Ok((r, c)),
        s => Err(Error::InvalidShape {
            shape: s.to_vec(),
            reason: format!("{op} expects [batch, classes]"),
        }),
    }
}

/// Row-wise softmax, shifted by the row maximum.
pub fn softmax<T: Scalar>(logits: &Tensor<T>) -> Result<Tensor<T>> {
    let (_, k) = rows_cols("softmax", logits)?;
    let mut out = logits.clone();
    for row in out.data_mut().chunks_exact_mut(k) {
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        let mut total = T::zero();
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            total += *v;
        }
        for v in row.iter_mut() {
            *v /= total;
        }
    }
    if out.is_finite() {
        Ok(out)
    } else {
        Err(Error::NonFinite { op: "softmax" })
    }
}

/// Vector-Jacobian product of [`softmax`] given its output.
pub fn softmax_backward<T: Scalar>(probs: &Tensor<T>, grad: &Tensor<T>) -> Result<Tensor<T>> {
    let (_, k) = rows_cols("softmax_backward", probs)?;
    if probs.shape() != grad.shape() {
        return Err(Error::mismatch("softmax_backward", probs.shape(), grad.shape()));
    }
    let mut out = grad.clone();
    for (g, p) in out.data_mut().chunks_exact_mut(k).zip(probs.data().chunks_exact(k)) {
        let dot: T = g.iter().zip(p).map(|(&g, &p)| g * p).sum();
        for (g, &p) in g.iter_mut().zip(p) {
            *g = p * (*g - dot);
        }
    }
    Ok(out)
}

/// Checks that every row is a probability distribution within [`SIMPLEX_TOL`].
pub fn check_simplex_rows<T: Scalar>(t: &Tensor<T>) -> Result<()> {
    let (_, k) = rows_cols("simplex check", t)?;
    for (row, vals) in t.data().chunks_exact(k).enumerate() {
        let sum: f64 = vals.iter().map(|v| v.as_f64()).sum();
        let min = vals.iter().map(|v| v.as_f64()).fold(f64::INFINITY, f64::min);
        if (sum - 1.0).abs() > SIMPLEX_TOL || min < -SIMPLEX_TOL || !sum.is_finite() {
            return Err(Error::NotOnSimplex { row, sum, min });
        }
    }
    Ok(())
}

/// Mean over the batch of `-sum_k t_k * ln(max(p_k, 1e-12))`.
pub fn cross_entropy<T: Scalar>(targets: &Tensor<T>, probs: &Tensor<T>) -> Result<T> {
    let (b, k) = rows_cols("cross_entropy", probs)?;
    if targets.shape() != probs.shape() {
        return Err(Error::mismatch("cross_entropy", targets.shape(), probs.shape()));
    }
    check_simplex_rows(targets)?;
    let floor = T::lit(PROB_FLOOR);
    let mut total = T::zero();
    for (t, p) in targets.data().chunks_exact(k).zip(probs.data().chunks_exact(k)) {
        for (&t, &p) in t.iter().zip(p) {
            if t != T::zero() {
                total -= t * p.max(floor).ln();
            }
        }
    }
    let loss = total / T::lit(b as f64);
    if loss.is_finite() {
        Ok(loss)
    } else {
        Err(Error::NonFinite { op: "cross_entropy" })
    }
}

/// Mean Shannon entropy of the rows; the lower bound of [`cross_entropy`]
/// for fixed targets.
pub fn entropy<T: Scalar>(targets: &Tensor<T>) -> Result<T> {
    cross_entropy(targets, targets)
}

/// Gradient of `cross_entropy(targets, softmax(z))` with respect to `z`:
/// `(p - t) / batch`.
pub fn softmax_cross_entropy_grad<T: Scalar>(
    probs: &Tensor<T>,
    targets: &Tensor<T>,
) -> Result<Tensor<T>> {
    let (b, _) = rows_cols("softmax_cross_entropy_grad", probs)?;
    if targets.shape() != probs.shape() {
        return Err(Error::mismatch(
            "softmax_cross_entropy_grad",
            targets.shape(),
            probs.shape(),
        ));
    }
    let inv = T::one() / T::lit(b as f64);
    let data = probs
        .data()
        .iter()
        .zip(targets.data())
        .map(|(&p, &t)| (p - t) * inv)
        .collect();
    Tensor::new(probs.shape(), data)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::new(shape, data.to_vec()).unwrap()
    }

    #[test]
    fn softmax_symmetry_and_shift_invariance() {
        let p = softmax(&t(&[1, 2], &[0.0, 0.0])).unwrap();
        assert_eq!(p.data(), &[0.5, 0.5]);
        let a = softmax(&t(&[1, 2], &[0.3, 1.7])).unwrap();
        let b = softmax(&t(&[1, 2], &[100.3, 101.7])).unwrap();
        for (x, y) in a.data().iter().zip(b.data()) {
            assert!((x - y).abs() < 1e-12);
        }
        let big = softmax(&t(&[1, 3], &[1000.0, 0.0, -1000.0])).unwrap();
        assert!(big.is_finite());
        assert!((big.data().iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn cross_entropy_hand_values() {
        let l = cross_entropy(&t(&[1, 2], &[1.0, 0.0]), &t(&[1, 2], &[0.5, 0.5])).unwrap();
        assert!((l - std::f64::consts::LN_2).abs() < 1e-12);
        assert!((l - 0.693147).abs() < 1e-6);
        let q = t(&[1, 4], &[0.25; 4]);
        let l = cross_entropy(&q, &q).unwrap();
        assert!((l - 4f64.ln()).abs() < 1e-12);
        assert!((l - 1.386294).abs() < 1e-6);
        let l = cross_entropy(&t(&[1, 2], &[1.0, 0.0]), &t(&[1, 2], &[1.0, 0.0])).unwrap();
        assert!(l.abs() < 1e-12);
    }

    #[test]
    fn cross_entropy_clamps_zero_probabilities() {
        let l = cross_entropy(&t(&[1, 2], &[0.0, 1.0]), &t(&[1, 2], &[1.0, 0.0])).unwrap();
        assert!((l - (-(1e-12f64).ln())).abs() < 1e-9);
    }

    #[test]
    fn cross_entropy_rejects_bad_targets() {
        let p = t(&[1, 2], &[0.5, 0.5]);
        assert!(matches!(
            cross_entropy(&t(&[1, 2], &[0.7, 0.7]), &p),
            Err(Error::NotOnSimplex { row: 0, .. })
        ));
        assert!(cross_entropy(&t(&[1, 2], &[1.5, -0.5]), &p).is_err());
        assert!(cross_entropy(&t(&[1, 3], &[1.0, 0.0, 0.0]), &p).is_err());
        // within tolerance
        assert!(cross_entropy(&t(&[1, 2], &[1.0 + 5e-7, 0.0]), &p).is_ok());
    }

    #[test]
    fn combined_gradient_vanishes_at_matched_targets() {
        let p = t(&[2, 3], &[0.2, 0.3, 0.5, 0.1, 0.1, 0.8]);
        let g = softmax_cross_entropy_grad(&p, &p).unwrap();
        assert!(g.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn combined_gradient_equals_softmax_backward_of_ce_gradient() {
        let logits = t(&[2, 3], &[0.1, -0.4, 2.0, 1.0, 0.0, -1.0]);
        let target = t(&[2, 3], &[0.0, 1.0, 0.0, 0.2, 0.3, 0.5]);
        let p = softmax(&logits).unwrap();
        // dL/dp = -t / (p * B)
        let dp = Tensor::new(
            &[2, 3],
            p.data()
                .iter()
                .zip(target.data())
                .map(|(p, t)| -t / (p * 2.0))
                .collect(),
        )
        .unwrap();
        let via_chain = softmax_backward(&p, &dp).unwrap();
        let fused = softmax_cross_entropy_grad(&p, &target).unwrap();
        for (a, b) in via_chain.data().iter().zip(fused.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}
