//! Example-level loss weighting and the weighted cross-entropy objective.
//!
//! With supervision fraction `f` and strength `lambda`, non-augmented examples
//! are scaled by `1 - lambda*f` and augmented ones by `1 + lambda*(1 - f)`.
//! For a batch whose augmented fraction is exactly `f` the weights average to
//! one, so the loss magnitude matches the unweighted objective and training
//! dynamics are preserved. `lambda = 0` weighs everything equally.
//!
//! Losses are computed in f64; the head is tiny, so the trainer converts its
//! f32 logits without measurable cost.

use ndarray::Array2;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ObjectiveError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
}

/// Validated (f, lambda) pair.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WeightingConfig {
    f: f64,
    lambda: f64,
}

impl WeightingConfig {
    /// Requires `f` in [0,1], `lambda >= 0` and `lambda * f <= 1` so the
    /// non-augmented weight stays non-negative.
    pub fn new(f: f64, lambda: f64) -> Result<Self, ObjectiveError> {
        if !(0.0..=1.0).contains(&f) {
            return Err(ObjectiveError::Config(format!("f must be in [0,1], got {f}")));
        }
        if lambda < 0.0 {
            return Err(ObjectiveError::Config(format!(
                "lambda must be non-negative, got {lambda}"
            )));
        }
        if lambda * f > 1.0 {
            return Err(ObjectiveError::Config(format!(
                "lambda*f = {} exceeds 1; non-augmented weight would be negative",
                lambda * f
            )));
        }
        Ok(Self { f, lambda })
    }

    pub fn f(&self) -> f64 {
        self.f
    }

    pub fn lambda(&self) -> f64 {
        self.lambda
    }
}

/// Weight of one example: `1 + lambda*(1-f)` when augmented, `1 - lambda*f`
/// otherwise.
pub fn example_weight(is_backmixed: bool, cfg: &WeightingConfig) -> f64 {
    if is_backmixed {
        1.0 + cfg.lambda * (1.0 - cfg.f)
    } else {
        1.0 - cfg.lambda * cfg.f
    }
}

fn check_shapes(
    logits: &Array2<f64>,
    labels: &[usize],
    weights: Option<&[f64]>,
) -> Result<(), ObjectiveError> {
    let (batch, classes) = logits.dim();
    if batch == 0 {
        return Err(ObjectiveError::ShapeMismatch("empty batch".into()));
    }
    if labels.len() != batch {
        return Err(ObjectiveError::ShapeMismatch(format!(
            "{} labels for batch of {batch}",
            labels.len()
        )));
    }
    if let Some(w) = weights {
        if w.len() != batch {
            return Err(ObjectiveError::ShapeMismatch(format!(
                "{} weights for batch of {batch}",
                w.len()
            )));
        }
        if let Some(bad) = w.iter().find(|&&x| x < 0.0 || !x.is_finite()) {
            return Err(ObjectiveError::Config(format!(
                "weights must be finite and non-negative, got {bad}"
            )));
        }
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
        return Err(ObjectiveError::ShapeMismatch(format!(
            "label {bad} out of range for {classes} classes"
        )));
    }
    Ok(())
}

/// Per-example cross-entropy values (negative log-softmax likelihoods).
fn per_example_ce(logits: &Array2<f64>, labels: &[usize]) -> Vec<f64> {
    logits
        .rows()
        .into_iter()
        .zip(labels)
        .map(|(row, &label)| {
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|&v| (v - max).exp()).sum::<f64>().ln();
            lse - row[label]
        })
        .collect()
}

/// Mean of `weight_b * CE_b` over the batch.
pub fn weighted_cross_entropy(
    logits: &Array2<f64>,
    labels: &[usize],
    weights: &[f64],
) -> Result<f64, ObjectiveError> {
    check_shapes(logits, labels, Some(weights))?;
    let ce = per_example_ce(logits, labels);
    let batch = labels.len() as f64;
    Ok(ce.iter().zip(weights).map(|(c, w)| c * w).sum::<f64>() / batch)
}

/// Unweighted mean cross-entropy.
pub fn cross_entropy(logits: &Array2<f64>, labels: &[usize]) -> Result<f64, ObjectiveError> {
    check_shapes(logits, labels, None)?;
    let ce = per_example_ce(logits, labels);
    Ok(ce.iter().sum::<f64>() / labels.len() as f64)
}

/// Unweighted loss plus gradient; the baseline objective.
pub fn cross_entropy_with_grad(
    logits: &Array2<f64>,
    labels: &[usize],
) -> Result<(f64, Array2<f64>), ObjectiveError> {
    check_shapes(logits, labels, None)?;
    let (batch, classes) = logits.dim();
    let mut grad = Array2::<f64>::zeros((batch, classes));
    let mut loss = 0.0;
    for (b, (row, &label)) in logits.rows().into_iter().zip(labels).enumerate() {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = row.iter().map(|&v| (v - max).exp()).collect();
        let sum: f64 = exps.iter().sum();
        let lse = max + sum.ln();
        loss += lse - row[label];
        let scale = 1.0 / batch as f64;
        for c in 0..classes {
            let softmax = exps[c] / sum;
            grad[[b, c]] = scale * (softmax - if c == label { 1.0 } else { 0.0 });
        }
    }
    Ok((loss / batch as f64, grad))
}

/// Loss plus its gradient with respect to the logits:
/// `d loss / d logit = (w_b / B) * (softmax - onehot)`.
pub fn weighted_cross_entropy_with_grad(
    logits: &Array2<f64>,
    labels: &[usize],
    weights: &[f64],
) -> Result<(f64, Array2<f64>), ObjectiveError> {
    check_shapes(logits, labels, Some(weights))?;
    let (batch, classes) = logits.dim();
    let mut grad = Array2::<f64>::zeros((batch, classes));
    let mut loss = 0.0;
    for (b, (row, &label)) in logits.rows().into_iter().zip(labels).enumerate() {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = row.iter().map(|&v| (v - max).exp()).collect();
        let sum: f64 = exps.iter().sum();
        let lse = max + sum.ln();
        loss += weights[b] * (lse - row[label]);
        let scale = weights[b] / batch as f64;
        for c in 0..classes {
            let softmax = exps[c] / sum;
            grad[[b, c]] = scale * (softmax - if c == label { 1.0 } else { 0.0 });
        }
    }
    Ok((loss / batch as f64, grad))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use ndarray::array;
    use rand::Rng as _;

    #[test]
    fn weight_formulas() {
        let cfg = WeightingConfig::new(0.05, 1.0).unwrap();
        assert_abs_diff_eq!(example_weight(false, &cfg), 0.95, epsilon = 1e-12);
        assert_abs_diff_eq!(example_weight(true, &cfg), 1.95, epsilon = 1e-12);
        // Mixture mean over the exact fraction is one.
        let mean = 0.05 * 1.95 + 0.95 * 0.95;
        assert_abs_diff_eq!(mean, 1.0, epsilon = 1e-12);

        let zero = WeightingConfig::new(0.3, 0.0).unwrap();
        assert_eq!(example_weight(false, &zero), 1.0);
        assert_eq!(example_weight(true, &zero), 1.0);

        let full = WeightingConfig::new(1.0, 0.7).unwrap();
        assert_abs_diff_eq!(example_weight(true, &full), 1.0, epsilon = 1e-12);
    }

    #[test]
    fn invalid_configs_rejected() {
        assert!(WeightingConfig::new(-0.1, 0.0).is_err());
        assert!(WeightingConfig::new(1.1, 0.0).is_err());
        assert!(WeightingConfig::new(0.5, -1.0).is_err());
        assert!(WeightingConfig::new(0.6, 2.0).is_err()); // lambda*f = 1.2
        assert!(WeightingConfig::new(0.5, 2.0).is_ok()); // lambda*f = 1.0 boundary
    }

    #[test]
    fn batch_mean_identity_over_exact_fraction_batches() {
        for &(f, lambda, batch) in &[(0.25, 1.0, 16usize), (0.5, 2.0, 64), (0.05, 1.0, 40)] {
            let cfg = WeightingConfig::new(f, lambda).unwrap();
            let augmented = (f * batch as f64).round() as usize;
            let mut sum = 0.0;
            for i in 0..batch {
                sum += example_weight(i < augmented, &cfg);
            }
            assert_abs_diff_eq!(sum / batch as f64, 1.0, epsilon = 1e-9);
        }
    }

    #[test]
    fn monotone_in_lambda() {
        let f = 0.3;
        let mut prev_aug = f64::NEG_INFINITY;
        let mut prev_plain = f64::INFINITY;
        for i in 0..=10 {
            let lambda = i as f64 * 0.3;
            let cfg = WeightingConfig::new(f, lambda).unwrap();
            let aug = example_weight(true, &cfg);
            let plain = example_weight(false, &cfg);
            assert!(aug > prev_aug || i == 0);
            assert!(plain < prev_plain || i == 0);
            prev_aug = aug;
            prev_plain = plain;
        }
    }

    #[test]
    fn weighted_ce_hand_example() {
        // Choose logits whose CE values are exactly 0.2 and 0.6.
        // CE = ln(1 + e^-d) for a 2-class margin d on the true class.
        let d0 = ((0.2f64).exp() - 1.0).recip().ln();
        let d1 = ((0.6f64).exp() - 1.0).recip().ln();
        let logits = array![[d0, 0.0], [d1, 0.0]];
        let labels = [0usize, 0];
        let ce = per_example_ce(&logits, &labels);
        assert_abs_diff_eq!(ce[0], 0.2, epsilon = 1e-12);
        assert_abs_diff_eq!(ce[1], 0.6, epsilon = 1e-12);
        let loss = weighted_cross_entropy(&logits, &labels, &[0.95, 1.95]).unwrap();
        assert_abs_diff_eq!(loss, 0.68, epsilon = 1e-12);
    }

    #[test]
    fn unit_weights_match_plain_ce_bitwise() {
        let mut rng = crate::rng::derived_rng(3, &[1]);
        let logits = Array2::from_shape_fn((8, 4), |_| rng.random_range(-3.0..3.0));
        let labels: Vec<usize> = (0..8).map(|_| rng.random_range(0..4)).collect();
        let weighted = weighted_cross_entropy(&logits, &labels, &vec![1.0; 8]).unwrap();
        let plain = cross_entropy(&logits, &labels).unwrap();
        assert_eq!(weighted.to_bits(), plain.to_bits());
    }

    #[test]
    fn perfect_logits_give_zero_loss() {
        // Probability ~1 on the true class: loss ~ 0 regardless of weights.
        let logits = array![[60.0, 0.0, 0.0], [0.0, 60.0, 0.0]];
        let loss = weighted_cross_entropy(&logits, &[0, 1], &[0.5, 7.0]).unwrap();
        assert_abs_diff_eq!(loss, 0.0, epsilon = 1e-12);
    }

    #[test]
    fn shape_errors() {
        let logits = array![[0.0, 1.0]];
        assert!(weighted_cross_entropy(&logits, &[0, 1], &[1.0, 1.0]).is_err());
        assert!(weighted_cross_entropy(&logits, &[0], &[1.0, 2.0]).is_err());
        assert!(weighted_cross_entropy(&logits, &[5], &[1.0]).is_err());
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let mut rng = crate::rng::derived_rng(11, &[2]);
        for _ in 0..5 {
            let batch = 6;
            let classes = 4;
            let logits = Array2::from_shape_fn((batch, classes), |_| rng.random_range(-2.0..2.0));
            let labels: Vec<usize> = (0..batch).map(|_| rng.random_range(0..classes)).collect();
            let weights: Vec<f64> = (0..batch).map(|_| rng.random_range(0.1..2.0)).collect();
            let (_, grad) = weighted_cross_entropy_with_grad(&logits, &labels, &weights).unwrap();
            let h = 1e-6;
            for b in 0..batch {
                for c in 0..classes {
                    let mut plus = logits.clone();
                    plus[[b, c]] += h;
                    let mut minus = logits.clone();
                    minus[[b, c]] -= h;
                    let fd = (weighted_cross_entropy(&plus, &labels, &weights).unwrap()
                        - weighted_cross_entropy(&minus, &labels, &weights).unwrap())
                        / (2.0 * h);
                    let g = grad[[b, c]];
                    let denom = g.abs().max(fd.abs()).max(1e-8);
                    assert!(
                        ((g - fd) / denom).abs() < 1e-4,
                        "grad {g} vs fd {fd} at ({b},{c})"
                    );
                }
            }
        }
    }
}
