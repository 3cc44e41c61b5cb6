//! Focus metrics (%E, %F) over activation maps and sector masks, plus
//! macro-averaged classification metrics.
//!
//! %E is the mean fraction of activation mass inside the sector; %F is the
//! mean fraction of highly activated pixels (score strictly above 0.5) inside
//! the sector. Frames with a zero denominator (all-zero map for %E, no high
//! pixel for %F) are excluded from the mean and counted.

use ndarray::Array2;
use thiserror::Error;

use crate::attribution::ActivationMap;
use crate::sector::SectorMask;

#[derive(Debug, Error)]
pub enum EvaluationError {
    #[error("misaligned inputs: {0}")]
    Misaligned(String),
    #[error("empty input: {0}")]
    Empty(String),
}

/// Threshold for "highly activated" pixels; strict inequality.
pub const HIGH_ACTIVATION: f64 = 0.5;

/// Mean of a per-frame ratio, with degenerate frames excluded and counted.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MetricMean {
    /// Mean over evaluated frames, in percent.
    pub mean_pct: f64,
    pub n_evaluated: usize,
    pub n_skipped_degenerate: usize,
}

/// Focus summary for one dataset split.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FocusReport {
    pub energy: MetricMean,
    pub focus: MetricMean,
}

fn check_pairs(maps: &[ActivationMap], masks: &[SectorMask]) -> Result<(), EvaluationError> {
    if maps.len() != masks.len() {
        return Err(EvaluationError::Misaligned(format!(
            "{} maps vs {} masks",
            maps.len(),
            masks.len()
        )));
    }
    if maps.is_empty() {
        return Err(EvaluationError::Empty("no map/mask pairs".into()));
    }
    for (i, (map, mask)) in maps.iter().zip(masks).enumerate() {
        if map.grid.dim() != mask.dim() {
            return Err(EvaluationError::Misaligned(format!(
                "pair {i}: map {:?} vs mask {:?}",
                map.grid.dim(),
                mask.dim()
            )));
        }
    }
    Ok(())
}

/// Mean per-frame fraction of activation mass inside the sector, in percent.
pub fn energy_percentage(
    maps: &[ActivationMap],
    masks: &[SectorMask],
) -> Result<MetricMean, EvaluationError> {
    check_pairs(maps, masks)?;
    let mut sum = 0.0f64;
    let mut evaluated = 0usize;
    for (map, mask) in maps.iter().zip(masks) {
        let mut inside = 0.0f64;
        let mut total = 0.0f64;
        for (&z, &m) in map.grid.iter().zip(mask.grid().iter()) {
            let z = z as f64;
            total += z;
            if m == 1 {
                inside += z;
            }
        }
        if total > 0.0 {
            sum += inside / total;
            evaluated += 1;
        }
    }
    Ok(MetricMean {
        mean_pct: if evaluated > 0 {
            100.0 * sum / evaluated as f64
        } else {
            0.0
        },
        n_evaluated: evaluated,
        n_skipped_degenerate: maps.len() - evaluated,
    })
}

/// Mean per-frame fraction of highly activated pixels inside the sector,
/// in percent.
pub fn focus_percentage(
    maps: &[ActivationMap],
    masks: &[SectorMask],
) -> Result<MetricMean, EvaluationError> {
    check_pairs(maps, masks)?;
    let mut sum = 0.0f64;
    let mut evaluated = 0usize;
    for (map, mask) in maps.iter().zip(masks) {
        let mut inside = 0usize;
        let mut high = 0usize;
        for (&z, &m) in map.grid.iter().zip(mask.grid().iter()) {
            if (z as f64) > HIGH_ACTIVATION {
                high += 1;
                if m == 1 {
                    inside += 1;
                }
            }
        }
        if high > 0 {
            sum += inside as f64 / high as f64;
            evaluated += 1;
        }
    }
    Ok(MetricMean {
        mean_pct: if evaluated > 0 {
            100.0 * sum / evaluated as f64
        } else {
            0.0
        },
        n_evaluated: evaluated,
        n_skipped_degenerate: maps.len() - evaluated,
    })
}

/// Both focus metrics at once.
pub fn focus_report(
    maps: &[ActivationMap],
    masks: &[SectorMask],
) -> Result<FocusReport, EvaluationError> {
    Ok(FocusReport {
        energy: energy_percentage(maps, masks)?,
        focus: focus_percentage(maps, masks)?,
    })
}

/// Per-class precision/recall/F1 plus support.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClassStats {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub support: usize,
}

/// Macro-averaged classification metrics, all in percent.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassificationReport {
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub per_class: Vec<ClassStats>,
    /// confusion[true][predicted]
    pub confusion: Array2<usize>,
}

/// Macro precision/recall/F1 over classes; classes with zero predicted
/// positives contribute precision 0, classes with zero support recall 0.
pub fn classification_metrics(
    predictions: &[usize],
    labels: &[usize],
    num_classes: usize,
) -> Result<ClassificationReport, EvaluationError> {
    if predictions.is_empty() {
        return Err(EvaluationError::Empty("no predictions".into()));
    }
    if predictions.len() != labels.len() {
        return Err(EvaluationError::Misaligned(format!(
            "{} predictions vs {} labels",
            predictions.len(),
            labels.len()
        )));
    }
    if let Some(&bad) = predictions.iter().chain(labels).find(|&&v| v >= num_classes) {
        return Err(EvaluationError::Misaligned(format!(
            "class id {bad} out of range for {num_classes} classes"
        )));
    }
    let mut confusion = Array2::<usize>::zeros((num_classes, num_classes));
    for (&p, &l) in predictions.iter().zip(labels) {
        confusion[[l, p]] += 1;
    }
    let mut per_class = Vec::with_capacity(num_classes);
    for c in 0..num_classes {
        let tp = confusion[[c, c]];
        let support: usize = (0..num_classes).map(|p| confusion[[c, p]]).sum();
        let predicted: usize = (0..num_classes).map(|l| confusion[[l, c]]).sum();
        let precision = if predicted > 0 {
            tp as f64 / predicted as f64
        } else {
            0.0
        };
        let recall = if support > 0 {
            tp as f64 / support as f64
        } else {
            0.0
        };
        let f1 = if precision + recall > 0.0 {
            2.0 * precision * recall / (precision + recall)
        } else {
            0.0
        };
        per_class.push(ClassStats {
            precision,
            recall,
            f1,
            support,
        });
    }
    let n = num_classes as f64;
    let correct: usize = (0..num_classes).map(|c| confusion[[c, c]]).sum();
    Ok(ClassificationReport {
        accuracy: 100.0 * correct as f64 / predictions.len() as f64,
        precision: 100.0 * per_class.iter().map(|s| s.precision).sum::<f64>() / n,
        recall: 100.0 * per_class.iter().map(|s| s.recall).sum::<f64>() / n,
        f1: 100.0 * per_class.iter().map(|s| s.f1).sum::<f64>() / n,
        per_class,
        confusion,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use ndarray::array;

    fn map(grid: Array2<f32>) -> ActivationMap {
        ActivationMap {
            grid,
            degenerate: false,
        }
    }

    fn mask(bits: Array2<u8>) -> SectorMask {
        SectorMask::new(bits).unwrap()
    }

    #[test]
    fn energy_uniform_map_equals_coverage() {
        let m = map(Array2::ones((4, 4)) * 0.3);
        let k = mask(Array2::from_shape_fn((4, 4), |(y, _)| u8::from(y == 0)));
        let r = energy_percentage(&[m], &[k]).unwrap();
        assert_abs_diff_eq!(r.mean_pct, 25.0, epsilon = 1e-9);
    }

    #[test]
    fn energy_zero_outside_mask_is_hundred() {
        let mut grid = Array2::<f32>::zeros((4, 4));
        grid[[0, 0]] = 0.7;
        grid[[0, 3]] = 0.4;
        let k = mask(Array2::from_shape_fn((4, 4), |(y, _)| u8::from(y == 0)));
        let r = energy_percentage(&[map(grid)], &[k]).unwrap();
        assert_abs_diff_eq!(r.mean_pct, 100.0, epsilon = 1e-9);
    }

    #[test]
    fn energy_hand_example() {
        let grid = array![[1.0f32, 0.5], [0.0, 0.5]];
        let k = mask(array![[1u8, 1], [0, 0]]);
        let r = energy_percentage(&[map(grid)], &[k]).unwrap();
        assert_abs_diff_eq!(r.mean_pct, 75.0, epsilon = 1e-9);
    }

    #[test]
    fn focus_all_high_inside_is_hundred() {
        let grid = array![[0.9f32, 0.2], [0.8, 0.1]];
        let k = mask(array![[1u8, 0], [1, 0]]);
        let r = focus_percentage(&[map(grid)], &[k]).unwrap();
        assert_abs_diff_eq!(r.mean_pct, 100.0, epsilon = 1e-9);
        assert_eq!(r.n_evaluated, 1);
    }

    #[test]
    fn focus_hand_example() {
        let grid = array![[0.6f32, 0.7], [0.8, 0.1]];
        let k = mask(array![[1u8, 0], [0, 1]]);
        let r = focus_percentage(&[map(grid)], &[k]).unwrap();
        assert_abs_diff_eq!(r.mean_pct, 100.0 / 3.0, epsilon = 1e-9);
    }

    #[test]
    fn focus_threshold_is_strict() {
        // Exactly 0.5 is not "high".
        let grid = array![[0.5f32, 0.5], [0.5, 0.5]];
        let k = mask(array![[1u8, 1], [1, 1]]);
        let r = focus_percentage(&[map(grid)], &[k]).unwrap();
        assert_eq!(r.n_evaluated, 0);
        assert_eq!(r.n_skipped_degenerate, 1);
    }

    #[test]
    fn degenerate_frames_skipped_and_counted() {
        let live = map(array![[0.9f32, 0.0], [0.0, 0.0]]);
        let dead = ActivationMap {
            grid: Array2::zeros((2, 2)),
            degenerate: true,
        };
        let k = mask(array![[1u8, 0], [0, 0]]);
        let e = energy_percentage(&[live.clone(), dead.clone()], &[k.clone(), k.clone()]).unwrap();
        assert_eq!(e.n_evaluated, 1);
        assert_eq!(e.n_skipped_degenerate, 1);
        assert_abs_diff_eq!(e.mean_pct, 100.0, epsilon = 1e-9);
        let f = focus_percentage(&[live, dead], &[k.clone(), k]).unwrap();
        assert_eq!(f.n_evaluated, 1);
        assert_eq!(f.n_skipped_degenerate, 1);
    }

    #[test]
    fn full_coverage_masks_give_hundred_for_both() {
        let grid = array![[0.9f32, 0.6], [0.2, 0.7]];
        let k = mask(Array2::ones((2, 2)));
        let report = focus_report(&[map(grid)], &[k]).unwrap();
        assert_abs_diff_eq!(report.energy.mean_pct, 100.0, epsilon = 1e-9);
        assert_abs_diff_eq!(report.focus.mean_pct, 100.0, epsilon = 1e-9);
    }

    #[test]
    fn identical_high_sets_give_identical_focus() {
        // Rescaling that preserves the >0.5 membership set leaves %F unchanged.
        let a = array![[0.9f32, 0.6], [0.3, 0.1]];
        let b = array![[1.0f32, 0.51], [0.5, 0.0]];
        let k = mask(array![[1u8, 0], [1, 0]]);
        let fa = focus_percentage(&[map(a)], &[k.clone()]).unwrap();
        let fb = focus_percentage(&[map(b)], &[k]).unwrap();
        assert_eq!(fa.mean_pct.to_bits(), fb.mean_pct.to_bits());
    }

    #[test]
    fn misaligned_inputs_error() {
        let m = map(Array2::zeros((2, 2)));
        let k = mask(Array2::zeros((3, 3)));
        assert!(energy_percentage(&[m.clone()], &[k]).is_err());
        assert!(energy_percentage(&[m], &[]).is_err());
    }

    #[test]
    fn classification_perfect_and_hand_example() {
        let perfect = classification_metrics(&[0, 1, 2, 3], &[0, 1, 2, 3], 4).unwrap();
        assert_abs_diff_eq!(perfect.accuracy, 100.0, epsilon = 1e-9);
        assert_abs_diff_eq!(perfect.f1, 100.0, epsilon = 1e-9);

        // predictions (1,1,0,0) vs labels (1,0,0,0)
        let r = classification_metrics(&[1, 1, 0, 0], &[1, 0, 0, 0], 2).unwrap();
        assert_abs_diff_eq!(r.accuracy, 75.0, epsilon = 1e-9);
        let f1_0 = 2.0 * 1.0 * (2.0 / 3.0) / (1.0 + 2.0 / 3.0);
        let f1_1 = 2.0 * 0.5 * 1.0 / (0.5 + 1.0);
        assert_abs_diff_eq!(r.f1, 100.0 * (f1_0 + f1_1) / 2.0, epsilon = 1e-9);
        assert!((r.f1 - 73.3).abs() < 0.05);
        // Row sums equal support; accuracy equals trace/total.
        for c in 0..2 {
            let row: usize = (0..2).map(|p| r.confusion[[c, p]]).sum();
            assert_eq!(row, r.per_class[c].support);
        }
    }

    #[test]
    fn order_invariance() {
        let a = classification_metrics(&[1, 0, 2, 1], &[1, 0, 1, 1], 3).unwrap();
        let b = classification_metrics(&[1, 2, 0, 1], &[1, 1, 0, 1], 3).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn zero_predicted_positives_contribute_zero_precision() {
        // Class 2 never predicted.
        let r = classification_metrics(&[0, 0, 1, 1], &[0, 2, 1, 2], 3).unwrap();
        assert_eq!(r.per_class[2].precision, 0.0);
        assert_eq!(r.per_class[2].f1, 0.0);
    }

    #[test]
    fn empty_input_errors() {
        assert!(classification_metrics(&[], &[], 2).is_err());
    }
}
