//! Dense kernels, losses, sampling primitives and a finite-difference probe.

mod rng;
mod tensor;

pub use rng::{RngPosition, RngState};
pub use tensor::Tensor2D;

use crate::error::{Error, Result};

/// Sentinel for a removed pre-softmax unit. Finite, so max-subtraction never
/// evaluates `inf - inf`.
pub const NEG_INF: f64 = -1e30;

/// Anything at or below this is treated as a masked entry.
const MASKED_THRESHOLD: f64 = NEG_INF * 0.5;

#[inline]
pub fn is_masked(v: f64) -> bool {
    v <= MASKED_THRESHOLD
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `ln σ(x)` without cancellation for large `|x|`.
#[inline]
pub fn log_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        -(-x).exp().ln_1p()
    } else {
        x - x.exp().ln_1p()
    }
}

/// Row-wise softmax with max subtraction. Masked entries come out as exactly 0.
pub fn softmax_rows(m: &Tensor2D) -> Result<Tensor2D> {
    let mut out = m.clone();
    for r in 0..m.rows() {
        let row = out.row_mut(r);
        if row.iter().any(|v| v.is_nan()) {
            return Err(Error::NonFinite(format!("softmax row {r} contains NaN")));
        }
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        if is_masked(max) {
            return Err(Error::DegenerateRow { row: r });
        }
        let mut total = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            total += *v;
        }
        for v in row.iter_mut() {
            *v /= total;
        }
    }
    Ok(out)
}

/// Mean cross-entropy of `logits` (one row per example) against class
/// indices, with its gradient `(softmax - onehot) / batch`.
pub fn cross_entropy_logits(logits: &Tensor2D, labels: &[usize]) -> Result<(f64, Tensor2D)> {
    if labels.len() != logits.rows() {
        return Err(Error::shape(
            "cross_entropy_logits",
            format!("{} labels for {} rows", labels.len(), logits.rows()),
        ));
    }
    let classes = logits.cols();
    if let Some(&bad) = labels.iter().find(|&&y| y >= classes) {
        return Err(Error::Index {
            what: "label",
            index: bad,
            bound: classes,
        });
    }
    let probs = softmax_rows(logits)?;
    let batch = labels.len() as f64;
    let mut loss = 0.0;
    let mut grad = probs;
    for (r, &y) in labels.iter().enumerate() {
        let row = logits.row(r);
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        loss += lse - row[y];
        let g = grad.row_mut(r);
        g[y] -= 1.0;
        g.iter_mut().for_each(|v| *v /= batch);
    }
    Ok((loss / batch, grad))
}

/// One Bernoulli(p) draw; consumes exactly one counter step.
pub fn sample_bernoulli(p: f64, rng: &mut RngState) -> Result<bool> {
    if !(0.0..=1.0).contains(&p) {
        return Err(Error::Parameter(format!("bernoulli p = {p} outside [0, 1]")));
    }
    Ok(rng.next_f64() < p)
}

#[inline]
fn gumbel(rng: &mut RngState) -> f64 {
    -(-rng.next_open01().ln()).ln()
}

/// Two-action Gumbel-max draw over logits `{logit, 0}`.
///
/// Returns `true` with probability `σ(logit)` together with the
/// log-probability of the action actually taken. Consumes two draws.
pub fn gumbel_binary_sample(logit: f64, rng: &mut RngState) -> Result<(bool, f64)> {
    if !logit.is_finite() {
        return Err(Error::NonFinite(format!("gumbel logit {logit}")));
    }
    let take = logit + gumbel(rng) > gumbel(rng);
    let logprob = if take {
        log_sigmoid(logit)
    } else {
        log_sigmoid(-logit)
    };
    Ok((take, logprob))
}

/// Central differences `(f(θ + h eᵢ) - f(θ - h eᵢ)) / 2h` for every coordinate.
pub fn finite_diff_grad(
    mut f: impl FnMut(&[f64]) -> f64,
    theta: &[f64],
    h: f64,
) -> Result<Vec<f64>> {
    if !(h > 0.0) {
        return Err(Error::Parameter(format!("step h = {h} must be positive")));
    }
    let mut probe = theta.to_vec();
    let mut grad = Vec::with_capacity(theta.len());
    for i in 0..theta.len() {
        probe[i] = theta[i] + h;
        let up = f(&probe);
        probe[i] = theta[i] - h;
        let down = f(&probe);
        probe[i] = theta[i];
        if !up.is_finite() || !down.is_finite() {
            return Err(Error::Oracle(format!(
                "objective not finite at coordinate {i}"
            )));
        }
        grad.push((up - down) / (2.0 * h));
    }
    Ok(grad)
}

/// Normwise relative error `max|a - b| / max(max|a|, max|b|)`; falls back to
/// the absolute difference when both sides are below `1e-12`.
pub fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let diff = analytic
        .iter()
        .zip(numeric)
        .fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
    let scale = analytic
        .iter()
        .chain(numeric)
        .fold(0.0f64, |m, v| m.max(v.abs()));
    if scale < 1e-12 {
        diff
    } else {
        diff / scale
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn softmax_uniform_and_masked() {
        let m = Tensor2D::new(2, 4, vec![0.0, 0.0, 0.0, 0.0, 0.0, NEG_INF, 3.0, NEG_INF]).unwrap();
        let s = softmax_rows(&m).unwrap();
        assert_eq!(s.row(0), &[0.25; 4]);
        assert_eq!(s.get(1, 1), 0.0);
        assert_eq!(s.get(1, 3), 0.0);
        let two = softmax_rows(&Tensor2D::new(1, 2, vec![0.0, NEG_INF]).unwrap()).unwrap();
        assert_eq!(two.data(), &[1.0, 0.0]);
    }

    #[test]
    fn softmax_matches_direct_normalization() {
        // exp(1), exp(2), exp(3) normalized; reference digits from a 50-digit evaluation.
        let expected = [
            0.090_030_573_170_380_458,
            0.244_728_471_054_797_65,
            0.665_240_955_774_821_89,
        ];
        let s = softmax_rows(&Tensor2D::new(1, 3, vec![1.0, 2.0, 3.0]).unwrap()).unwrap();
        for (a, b) in s.data().iter().zip(expected) {
            assert!((a - b).abs() < 1e-15, "{a} vs {b}");
        }
    }

    #[test]
    fn all_masked_row_is_degenerate() {
        let m = Tensor2D::new(2, 2, vec![0.0, 1.0, NEG_INF, NEG_INF]).unwrap();
        assert!(matches!(softmax_rows(&m), Err(Error::DegenerateRow { row: 1 })));
    }

    #[test]
    fn cross_entropy_edge_cases() {
        let (loss, _) = cross_entropy_logits(&Tensor2D::zeros(2, 5), &[0, 3]).unwrap();
        assert!((loss - 5f64.ln()).abs() < 1e-14);
        let sat = Tensor2D::new(1, 2, vec![30.0, -30.0]).unwrap();
        let (loss, _) = cross_entropy_logits(&sat, &[0]).unwrap();
        assert!(loss < 1e-20);
        assert!(matches!(
            cross_entropy_logits(&sat, &[2]),
            Err(Error::Index { .. })
        ));
    }

    #[test]
    fn cross_entropy_gradient_matches_central_difference() {
        let logits =
            Tensor2D::new(3, 4, vec![0.3, -1.2, 2.0, 0.1, 1.0, 1.5, -0.4, 0.0, -2.0, 0.7, 0.2, 0.9])
                .unwrap();
        let labels = [2, 0, 3];
        let (_, grad) = cross_entropy_logits(&logits, &labels).unwrap();
        let numeric = finite_diff_grad(
            |theta| {
                let t = Tensor2D::new(3, 4, theta.to_vec()).unwrap();
                cross_entropy_logits(&t, &labels).unwrap().0
            },
            logits.data(),
            1e-5,
        )
        .unwrap();
        assert!(relative_error(grad.data(), &numeric) <= 1e-6);
    }

    #[test]
    fn bernoulli_endpoints_and_rate() {
        let mut rng = RngState::new(11, 1);
        for _ in 0..1000 {
            assert!(!sample_bernoulli(0.0, &mut rng).unwrap());
            assert!(sample_bernoulli(1.0, &mut rng).unwrap());
        }
        let before = rng.counter();
        sample_bernoulli(0.5, &mut rng).unwrap();
        assert_eq!(rng.counter(), before + 1);
        let n = 100_000;
        let hits = (0..n)
            .filter(|_| sample_bernoulli(0.3, &mut rng).unwrap())
            .count();
        let sigma = (0.3f64 * 0.7 / n as f64).sqrt();
        assert!((hits as f64 / n as f64 - 0.3).abs() <= 3.0 * sigma);
        assert!(sample_bernoulli(1.5, &mut rng).is_err());
        assert!(sample_bernoulli(-0.1, &mut rng).is_err());
    }

    #[test]
    fn gumbel_binary_rates() {
        let mut rng = RngState::new(3, 2);
        let (_, lp) = gumbel_binary_sample(0.0, &mut rng).unwrap();
        assert!((lp - 0.5f64.ln()).abs() < 1e-15);
        let (bit, lp) = gumbel_binary_sample(20.0, &mut rng).unwrap();
        assert!(bit);
        assert!(lp.abs() < 1e-8);
        let n = 200_000;
        let hits = (0..n)
            .filter(|_| gumbel_binary_sample(1.0, &mut rng).unwrap().0)
            .count();
        let p = sigmoid(1.0);
        let sigma = (p * (1.0 - p) / n as f64).sqrt();
        assert!((hits as f64 / n as f64 - p).abs() <= 3.0 * sigma);
        assert!(gumbel_binary_sample(f64::NAN, &mut rng).is_err());
    }

    #[test]
    fn finite_difference_basics() {
        let g = finite_diff_grad(|t| t[0] * t[0], &[3.0], 1e-5).unwrap();
        assert!((g[0] - 6.0).abs() < 1e-6);
        let g = finite_diff_grad(|_| 4.2, &[1.0, -2.0, 0.5], 1e-5).unwrap();
        assert!(g.iter().all(|&v| v == 0.0));
        assert!(finite_diff_grad(|_| f64::NAN, &[1.0], 1e-5).is_err());
        assert!(finite_diff_grad(|_| 0.0, &[1.0], 0.0).is_err());
    }

    fn tensor_strategy(rows: usize, cols: usize) -> impl Strategy<Value = Tensor2D> {
        proptest::collection::vec(-1.0f64..1.0, rows * cols)
            .prop_map(move |d| Tensor2D::new(rows, cols, d).unwrap())
    }

    proptest! {
        #[test]
        fn softmax_rows_sum_to_one(m in tensor_strategy(5, 7), drop in proptest::collection::vec(any::<bool>(), 35)) {
            let mut m = m.scale(20.0);
            for (i, d) in drop.iter().enumerate() {
                // keep column 0 so no row is degenerate
                if *d && i % 7 != 0 {
                    m.data_mut()[i] = NEG_INF;
                }
            }
            let s = softmax_rows(&m).unwrap();
            for r in s.row_sums() {
                prop_assert!((r - 1.0).abs() <= 1e-12);
            }
            prop_assert!(s.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
        }

        #[test]
        fn matmul_is_associative(a in tensor_strategy(8, 8), b in tensor_strategy(8, 8), c in tensor_strategy(8, 8)) {
            let left = a.matmul(&b).unwrap().matmul(&c).unwrap();
            let right = a.matmul(&b.matmul(&c).unwrap()).unwrap();
            prop_assert!(left.sub(&right).unwrap().max_abs() <= 1e-9);
        }

        #[test]
        fn gumbel_branch_probabilities_sum_to_one(logit in -40.0f64..40.0) {
            let total = log_sigmoid(logit).exp() + log_sigmoid(-logit).exp();
            prop_assert!((total - 1.0).abs() <= 1e-12);
        }
    }
}
